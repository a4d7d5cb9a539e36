"""Cardiac-cycle phasing and chamber structure/function measurements."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import long_axis_length, mask_area
from .numerics import median, nearest_index, percentile, round_half_up

logger = logging.getLogger(__name__)

# Per-video reduction over windows, then study reduction over videos (percentiles).
VIDEO_PERCENTILE = {"lvedv": 90.0, "lvesv": 50.0, "lvef": 50.0, "lavol": 50.0, "lvm": 50.0}
STUDY_PERCENTILE = {"lvedv": 50.0, "lvesv": 50.0, "lvef": 50.0, "lavol": 50.0, "lvm": 50.0}

# Report names; volume and mass metrics are divided by BSA.
REPORT_NAMES = {"lvedv": "lvedvi", "lvesv": "lvesvi", "lvef": "lvef", "lavol": "lavoli", "lvm": "lvmi"}
INDEXED_UNITS = {"lvedv": "mL/kg/m^2", "lvesv": "mL/kg/m^2", "lavol": "mL/kg/m^2", "lvm": "g/kg/m^2", "lvef": "%"}
RAW_UNITS = {"lvedv": "mL", "lvesv": "mL", "lavol": "mL", "lvm": "g", "lvef": "%"}

MYOCARDIAL_DENSITY = 1.05  # g / mL
LA_LV_MIN_RATIO = 0.30


def area_length_volume(area: float, length: float) -> float:
    """Single-plane area-length volume, 8 A^2 / (3 pi L); cm^2, cm -> mL."""
    if not length > 0:
        raise ValueError(f"length must be positive, got {length}")
    if area < 0:
        raise ValueError(f"area must be non-negative, got {area}")
    return 8.0 * area * area / (3.0 * math.pi * length)


def lv_mass_area_length(epi_area: float, endo_area: float, length: float) -> float:
    """Area-length LV mass in grams.

    Mean wall thickness comes from the radii of circles with the epicardial
    and endocardial areas; mass = 1.05 * 5/6 * [A_epi (L + t) - A_endo L].
    """
    if not length > 0:
        raise ValueError(f"length must be positive, got {length}")
    if endo_area < 0 or epi_area < endo_area:
        raise ValueError(f"need epi_area >= endo_area >= 0, got {epi_area}, {endo_area}")
    t = math.sqrt(epi_area / math.pi) - math.sqrt(endo_area / math.pi)
    return MYOCARDIAL_DENSITY * (5.0 / 6.0) * (epi_area * (length + t) - endo_area * length)


def ejection_fraction(edv: float, esv: float) -> float:
    if not edv > 0:
        raise ValueError(f"edv must be positive, got {edv}")
    if esv < 0 or esv > edv:
        raise ValueError(f"need 0 <= esv <= edv, got esv={esv}, edv={edv}")
    # clamp float round-off at the esv = 0 end
    return min(100.0 * (edv - esv) / edv, 100.0)


def la_occlusion_filter(lavol: float, lvedv: float, threshold: float = LA_LV_MIN_RATIO) -> str:
    """'exclude' when the LA is implausibly small relative to the LV (likely cut off)."""
    if not lvedv > 0:
        raise ValueError(f"lvedv must be positive, got {lvedv}")
    return "exclude" if lavol / lvedv < threshold else "keep"


def index_by_bsa(value: float, bsa: float | None) -> tuple[float, bool]:
    """Return (value / bsa, True), or (value, False) when BSA is unavailable."""
    if bsa is None or not bsa > 0:
        return value, False
    return value / bsa, True


@dataclass
class ChamberTrace:
    """Per-frame physical areas (cm^2) and long-axis lengths (cm).

    Area keys: ``lv`` (blood pool), ``lv_epi`` (blood pool plus muscle), ``la``.
    Length keys: ``lv``, ``la``.
    """

    areas: dict[str, np.ndarray]
    lengths: dict[str, np.ndarray]
    frame_interval: float
    heart_rate: float

    def __post_init__(self):
        sizes = {len(v) for v in (*self.areas.values(), *self.lengths.values())}
        if len(sizes) > 1:
            raise ValueError("all traces must have one entry per frame")
        for v in (*self.areas.values(), *self.lengths.values()):
            if np.any(np.asarray(v) < 0):
                raise ValueError("areas and lengths must be non-negative")

    @property
    def n_frames(self) -> int:
        return len(next(iter(self.areas.values())))

    @property
    def cycle_frames(self) -> float:
        return (60.0 / self.heart_rate) / self.frame_interval


def chamber_trace(segmentations, metadata) -> ChamberTrace:
    """Build area/length traces from per-frame label maps."""
    from .segmentation import StructureLabel as S

    sx, sy = metadata.pixel_spacing_x, metadata.pixel_spacing_y
    lv_a, epi_a, la_a, lv_l, la_l = [], [], [], [], []
    for seg in segmentations:
        lm = seg.label_map if hasattr(seg, "label_map") else np.asarray(seg)
        lv = lm == S.LV_BLOOD
        la = lm == S.LA_BLOOD
        lv_a.append(mask_area(lv, sx, sy))
        epi_a.append(mask_area(lv | (lm == S.LV_MUSCLE), sx, sy))
        la_a.append(mask_area(la, sx, sy))
        lv_l.append(long_axis_length(lv, sx, sy))
        la_l.append(long_axis_length(la, sx, sy))
    return ChamberTrace(
        areas={"lv": np.array(lv_a), "lv_epi": np.array(epi_a), "la": np.array(la_a)},
        lengths={"lv": np.array(lv_l), "la": np.array(la_l)},
        frame_interval=metadata.frame_interval,
        heart_rate=metadata.heart_rate,
    )


@dataclass(frozen=True)
class CycleWindow:
    start: int
    end: int  # exclusive

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[CycleWindow, ...]
    cycle_frames: float
    window_length: int
    step: int

    @property
    def insufficient_frames(self) -> bool:
        return not self.windows


def cycle_window_plan(trace: ChamberTrace | None = None, *, n_frames: int | None = None,
                      heart_rate: float | None = None, frame_interval: float | None = None,
                      window_fraction: float = 0.9, step_fraction: float = 0.5) -> WindowPlan:
    """Sliding windows of 90% of a beat, advanced by half a beat.

    Window length and step are rounded half-up to whole frames; only windows
    lying entirely inside the trace are kept.
    """
    if trace is not None:
        n_frames, heart_rate, frame_interval = trace.n_frames, trace.heart_rate, trace.frame_interval
    if not (heart_rate and heart_rate > 0 and frame_interval and frame_interval > 0):
        raise ValueError("heart_rate and frame_interval must be positive")
    cycle = (60.0 / heart_rate) / frame_interval
    length = max(round_half_up(window_fraction * cycle), 1)
    step = max(round_half_up(step_fraction * cycle), 1)
    windows = tuple(CycleWindow(s, s + length) for s in range(0, n_frames - length + 1, step))
    return WindowPlan(windows=windows, cycle_frames=cycle, window_length=length, step=step)


@dataclass(frozen=True)
class WindowExtremes:
    ed_area: float
    es_area: float
    ed_length: float
    es_length: float
    ed_frame: int
    es_frame: int


def window_extremes(trace: ChamberTrace, window: CycleWindow, structure: str = "lv",
                    high: float = 90.0, low: float = 10.0) -> WindowExtremes:
    """ED/ES areas as the high/low interpolated percentiles of the window.

    Lengths come from the frame whose area lies closest to each percentile
    value (earliest frame on ties).
    """
    if not 0 <= window.start < window.end <= trace.n_frames:
        raise ValueError(f"window {window} outside trace of {trace.n_frames} frames")
    areas = np.asarray(trace.areas[structure][window.start:window.end], dtype=float)
    lengths = np.asarray(trace.lengths[structure if structure in trace.lengths else "lv"][window.start:window.end])
    ed = percentile(areas, high)
    es = percentile(areas, low)
    i_ed = nearest_index(areas, ed)
    i_es = nearest_index(areas, es)
    return WindowExtremes(ed, es, float(lengths[i_ed]), float(lengths[i_es]),
                          window.start + i_ed, window.start + i_es)


def window_values(trace: ChamberTrace, plan: WindowPlan, flags: list[str] | None = None) -> dict[str, list[float]]:
    """Per-window EDV, ESV, EF, LA volume and LV mass for one video."""
    flags = flags if flags is not None else []
    out: dict[str, list[float]] = {k: [] for k in VIDEO_PERCENTILE}
    for w in plan.windows:
        lv = window_extremes(trace, w, "lv")
        if lv.ed_length > 0 and lv.es_length > 0 and lv.ed_area > 0:
            edv = area_length_volume(lv.ed_area, lv.ed_length)
            esv = area_length_volume(lv.es_area, lv.es_length)
            out["lvedv"].append(edv)
            out["lvesv"].append(esv)
            if esv <= edv:
                out["lvef"].append(ejection_fraction(edv, esv))
            else:
                flags.append(f"window {w.start}-{w.end}: ESV exceeds EDV, EF skipped")
        if "la" in trace.areas and np.any(trace.areas["la"][w.start:w.end] > 0):
            la = window_extremes(trace, w, "la")
            if la.ed_length > 0:
                out["lavol"].append(area_length_volume(la.ed_area, la.ed_length))
        if "lv_epi" in trace.areas:
            epi_win = np.asarray(trace.areas["lv_epi"][w.start:w.end])
            epi = percentile(epi_win, 90.0)
            k = w.start + nearest_index(epi_win, epi)
            endo = float(trace.areas["lv"][k])
            length = float(trace.lengths["lv"][k])
            if length > 0 and epi > endo:
                out["lvm"].append(lv_mass_area_length(epi, endo, length))
    return out


def _reduce(values: Sequence[float], q: float) -> float:
    return median(values) if q == 50.0 else percentile(values, q)


@dataclass
class MetricEntry:
    name: str
    study_value: float | None
    raw_value: float | None
    per_video: list[float]
    per_video_windows: list[list[float]]
    video_ids: list[str]
    n_videos: int
    units: str
    indexed: bool

    def to_dict(self) -> dict:
        return {
            "value": self.study_value,
            "raw_value": self.raw_value,
            "n_videos": self.n_videos,
            "per_video": [{"video": v, "value": x, "windows": w}
                          for v, x, w in zip(self.video_ids, self.per_video, self.per_video_windows)],
            "units": self.units,
            "indexed": self.indexed,
        }


def aggregate_measurements(per_video_windows: Sequence[Sequence[float]], metric: str,
                           video_percentile: float | None = None,
                           study_percentile: float | None = None) -> tuple[float | None, list[float]]:
    """Reduce window values to one value per video, then one per study.

    Returns ``(study_value, per_video_values)``; videos without windows are
    skipped and ``study_value`` is None when nothing remains.
    """
    vq = VIDEO_PERCENTILE[metric] if video_percentile is None else video_percentile
    sq = STUDY_PERCENTILE[metric] if study_percentile is None else study_percentile
    per_video = [_reduce(w, vq) for w in per_video_windows if len(w)]
    if not per_video:
        return None, []
    return _reduce(per_video, sq), per_video


@dataclass
class MeasurementSet:
    metrics: dict[str, MetricEntry] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    vpqs: float | None = None

    def value(self, name: str) -> float | None:
        entry = self.metrics.get(name)
        return None if entry is None else entry.study_value

    def to_dict(self) -> dict:
        return {
            "metrics": {k: v.to_dict() for k, v in sorted(self.metrics.items())},
            "flags": list(self.flags),
            "vpqs": self.vpqs,
        }


def quantify_study(video_windows: dict[str, dict[str, list[float]]], bsa: float | None,
                   vpqs: float | None = None, la_threshold: float = LA_LV_MIN_RATIO,
                   video_percentile: dict | None = None, study_percentile: dict | None = None,
                   flags: list[str] | None = None) -> MeasurementSet:
    """Aggregate per-window values of every routed video into study metrics.

    ``video_windows`` maps a video id to the output of :func:`window_values`.
    LA volumes of videos failing the LA/LV ratio check are dropped.
    """
    vperc = {**VIDEO_PERCENTILE, **(video_percentile or {})}
    sperc = {**STUDY_PERCENTILE, **(study_percentile or {})}
    result = MeasurementSet(flags=list(flags or []), vpqs=vpqs)
    vids = sorted(video_windows)

    la_keep = {}
    for vid in vids:
        w = video_windows[vid]
        la_keep[vid] = True
        if w.get("lavol") and w.get("lvedv"):
            lavol = _reduce(w["lavol"], vperc["lavol"])
            lvedv = _reduce(w["lvedv"], vperc["lvedv"])
            if la_occlusion_filter(lavol, lvedv, la_threshold) == "exclude":
                la_keep[vid] = False
                result.flags.append(f"{vid}: LA volume excluded (LA/LV ratio {lavol / lvedv:.3f} < {la_threshold})")

    for metric in VIDEO_PERCENTILE:
        ids = [v for v in vids if video_windows[v].get(metric) and (metric != "lavol" or la_keep[v])]
        windows = [list(video_windows[v][metric]) for v in ids]
        study, per_video = aggregate_measurements(windows, metric, vperc[metric], sperc[metric])
        name = REPORT_NAMES[metric]
        if study is None:
            result.flags.append(f"{name}: no valid windows")
            continue
        if metric == "lvef":
            value, indexed = study, False
            units = RAW_UNITS[metric]
        else:
            value, indexed = index_by_bsa(study, bsa)
            units = INDEXED_UNITS[metric] if indexed else RAW_UNITS[metric]
            if not indexed:
                result.flags.append(f"{name}: body surface area missing, raw value reported")
        result.metrics[name] = MetricEntry(
            name=name, study_value=value, raw_value=study, per_video=per_video, per_video_windows=windows,
            video_ids=ids, n_videos=len(per_video), units=units, indexed=indexed,
        )
    return result
