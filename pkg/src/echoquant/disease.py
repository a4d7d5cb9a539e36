"""Phased ED/ES image pairs and study-level disease probabilities."""

from __future__ import annotations

import json
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .numerics import median, nearest_index, percentile
from .views import ViewLabel

PAIR_SIZE = 224
SMOOTHING_WINDOW = 3
DISEASE_VIEWS = (ViewLabel.PLAX, ViewLabel.A4C)
LOGIT_EPS = 1e-6


class DiseaseError(ValueError):
    pass


def resize_bilinear(image: np.ndarray, size: tuple[int, int] = (PAIR_SIZE, PAIR_SIZE)) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape
    h, w = size
    ys = (np.arange(h) + 0.5) * (H / h) - 0.5
    xs = (np.arange(w) + 0.5) * (W / w) - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, H - 1), np.clip(xs, 0, W - 1), indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def rolling_median(values, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Centred running median; the ends repeat the edge samples."""
    v = np.asarray(values, dtype=float)
    if window <= 1:
        return v.copy()
    return ndimage.median_filter(v, size=window, mode="nearest")


@dataclass(frozen=True)
class PhasedImagePair:
    ed_image: np.ndarray
    es_image: np.ndarray
    view: ViewLabel | None
    ed_frame: int
    es_frame: int
    low_confidence: bool = False
    smoothed_trace: np.ndarray | None = field(default=None, repr=False, compare=False)


def extract_phased_pair(video, lv_area_trace, view=None, size: int = PAIR_SIZE,
                        window: int = SMOOTHING_WINDOW, high: float = 90.0, low: float = 10.0) -> PhasedImagePair:
    """ED and ES frames from the smoothed area trace, resized to ``size`` square.

    ED is the frame whose smoothed area is nearest the ``high`` percentile,
    ES the one nearest the ``low`` percentile; ties go to the earliest frame.
    A flat trace yields frames (0, 0) flagged low-confidence.
    """
    areas = np.asarray(lv_area_trace, dtype=float)
    frames = np.asarray(video.frames)
    if len(areas) != len(frames):
        raise DiseaseError(f"area trace has {len(areas)} samples for {len(frames)} frames")
    cycle = getattr(video.metadata, "cycle_frames", None)
    needed = max(window, math.ceil(cycle - 1e-9) if cycle else 2)
    if len(areas) < needed:
        raise DiseaseError(f"trace of {len(areas)} frames is shorter than one cycle ({needed})")
    smooth = rolling_median(areas, window)
    ed = nearest_index(smooth, percentile(smooth, high))
    es = nearest_index(smooth, percentile(smooth, low))
    flat = bool(np.ptp(smooth) == 0)
    return PhasedImagePair(
        ed_image=resize_bilinear(frames[ed], (size, size)),
        es_image=resize_bilinear(frames[es], (size, size)),
        view=None if view is None else ViewLabel.parse(view),
        ed_frame=int(ed),
        es_frame=int(es),
        low_confidence=flat,
        smoothed_trace=smooth,
    )


def phasing_trace(segmentations, view) -> np.ndarray:
    """Per-frame pixel count used to phase a video.

    Views with an LV blood-pool label use it; PLAX has none, so the total
    labelled area stands in.
    """
    from .segmentation import VIEW_STRUCTURES, StructureLabel

    view = ViewLabel.parse(view)
    maps = [s.label_map if hasattr(s, "label_map") else np.asarray(s) for s in segmentations]
    if StructureLabel.LV_BLOOD in VIEW_STRUCTURES.get(view, ()):
        return np.array([np.count_nonzero(m == StructureLabel.LV_BLOOD) for m in maps], dtype=float)
    return np.array([np.count_nonzero(m) for m in maps], dtype=float)


class DiseaseModel(Protocol):
    def predict(self, pair: PhasedImagePair, round_index: int) -> float: ...


def pair_contraction(pair: PhasedImagePair) -> float:
    """Relative drop in mean intensity from ED to ES; a crude pair statistic."""
    ed = float(np.mean(pair.ed_image))
    es = float(np.mean(pair.es_image))
    return 0.0 if ed == 0 else (ed - es) / ed


@dataclass(frozen=True)
class MockDiseaseModel:
    """Logistic function of a pair statistic plus a seeded per-round perturbation."""

    gain: float = 10.0
    center: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    statistic: Callable[[PhasedImagePair], float] = pair_contraction

    def predict(self, pair: PhasedImagePair, round_index: int) -> float:
        z = self.gain * (self.statistic(pair) - self.center)
        if self.jitter > 0:
            z += np.random.default_rng([self.seed, round_index, pair.ed_frame, pair.es_frame]).normal(0, self.jitter)
        return float(1.0 / (1.0 + math.exp(-z)))


@dataclass(frozen=True)
class ExternalDiseaseModel:
    """Runs ``command... ED_PNG ES_PNG ROUND``; standard output is one probability."""

    command: tuple[str, ...]
    timeout: float = 120.0

    def predict(self, pair: PhasedImagePair, round_index: int) -> float:
        from PIL import Image

        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for name, img in (("ed.png", pair.ed_image), ("es.png", pair.es_image)):
                p = Path(tmp) / name
                Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8)).save(p)
                paths.append(str(p))
            proc = subprocess.run([*self.command, *paths, str(round_index)], capture_output=True, text=True,
                                  timeout=self.timeout, check=True)
        out = proc.stdout.strip()
        p = float(json.loads(out)["probability"]) if out.startswith("{") else float(out)
        if not 0 <= p <= 1:
            raise DiseaseError(f"model returned probability {p} outside [0, 1]")
        return p


def score_video(model: DiseaseModel, pair: PhasedImagePair, rounds: int = 4) -> list[float]:
    if rounds < 1:
        raise DiseaseError("need at least one round")
    return [float(model.predict(pair, k)) for k in range(rounds)]


def logit(p: float, eps: float = LOGIT_EPS) -> float:
    p = min(max(float(p), eps), 1.0 - eps)
    return math.log(p / (1.0 - p))


@dataclass
class DiseaseScore:
    per_video_rounds: dict[str, list[float]]
    per_video_median: dict[str, float]
    view_medians: dict[str, float]
    score: float
    logit: float

    def to_dict(self) -> dict:
        return {
            "per_video_rounds": {k: list(v) for k, v in sorted(self.per_video_rounds.items())},
            "per_video_median": dict(sorted(self.per_video_median.items())),
            "view_medians": dict(sorted(self.view_medians.items())),
            "score": self.score,
            "logit": self.logit,
        }


def aggregate_disease_score(per_video_rounds: dict[str, Sequence[float]], views: dict[str, object]) -> DiseaseScore:
    """Median over rounds, median over videos of each view, mean over PLAX and A4c.

    Videos tagged with any other view are ignored.
    """
    medians: dict[str, float] = {}
    by_view: dict[ViewLabel, list[float]] = {v: [] for v in DISEASE_VIEWS}
    for vid in sorted(per_video_rounds):
        rounds = [float(p) for p in per_video_rounds[vid]]
        if not rounds:
            raise DiseaseError(f"video {vid} has no rounds")
        if any(not 0 <= p <= 1 for p in rounds):
            raise DiseaseError(f"video {vid} has probabilities outside [0, 1]")
        view = ViewLabel.parse(views[vid])
        if view not in by_view:
            continue
        medians[vid] = median(rounds)
        by_view[view].append(medians[vid])
    view_medians = {str(v): median(ps) for v, ps in by_view.items() if ps}
    if not view_medians:
        raise DiseaseError("no PLAX or A4c video to score")
    vals = list(view_medians.values())
    score = vals[0] if len(vals) == 1 else (vals[0] + vals[1]) / 2
    return DiseaseScore(
        per_video_rounds={k: [float(p) for p in per_video_rounds[k]] for k in medians},
        per_video_median=medians,
        view_medians=view_medians,
        score=score,
        logit=logit(score),
    )


def score_correlates(scores: Sequence[float], measurements: dict[str, Sequence[float | None]]) -> dict[str, float | None]:
    """Spearman correlation of logit scores against each measurement series.

    Pairs where either side is missing are dropped; None marks an undefined
    coefficient (a constant side).
    """
    from .stats import spearman

    out: dict[str, float | None] = {}
    for name in sorted(measurements):
        vals = measurements[name]
        if len(vals) != len(scores):
            raise DiseaseError(f"{name}: {len(vals)} values for {len(scores)} scores")
        pairs = [(logit(s), float(v)) for s, v in zip(scores, vals) if s is not None and v is not None]
        if len(pairs) < 3:
            raise DiseaseError(f"{name}: need at least 3 pairs, got {len(pairs)}")
        x, y = zip(*pairs)
        out[name] = spearman(x, y)
    return out
