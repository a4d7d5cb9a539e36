"""Study bundles: loading, writing, validation and periphery masking.

A bundle is a directory holding ``manifest.json`` plus one raw uint8 binary
per video (frame-major, then rows, then columns).  Ground-truth label maps
for phantom videos may ride along as a second binary with the same layout.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class BundleError(ValueError):
    """Raised for malformed bundles or invalid metadata."""


@dataclass(frozen=True)
class StudyMetadata:
    study_id: str
    frame_interval: float
    heart_rate: float
    rows: int
    cols: int
    pixel_spacing_x: float
    pixel_spacing_y: float
    body_surface_area: float | None = None
    acquisition_date: _dt.date | None = None

    def __post_init__(self):
        for name in ("frame_interval", "heart_rate", "pixel_spacing_x", "pixel_spacing_y"):
            value = getattr(self, name)
            if not (value > 0 and np.isfinite(value)):
                raise BundleError(f"{name} must be positive, got {value!r}")
        if self.rows <= 0 or self.cols <= 0:
            raise BundleError(f"rows/cols must be positive, got {self.rows}x{self.cols}")
        if self.body_surface_area is not None and not self.body_surface_area > 0:
            raise BundleError(f"body_surface_area must be positive, got {self.body_surface_area!r}")

    @property
    def cycle_frames(self) -> float:
        """Number of frames spanned by one cardiac cycle."""
        return (60.0 / self.heart_rate) / self.frame_interval


@dataclass(frozen=True)
class EchoVideo:
    frames: np.ndarray
    metadata: StudyMetadata
    view_label: str | None = None
    truth_masks: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise BundleError(f"frames must be T x H x W, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise BundleError("a video needs at least 2 frames")
        if frames.shape[1:] != (self.metadata.rows, self.metadata.cols):
            raise BundleError(
                f"frame size {frames.shape[1:]} does not match metadata "
                f"{(self.metadata.rows, self.metadata.cols)}"
            )
        if self.truth_masks is not None and np.shape(self.truth_masks) != frames.shape:
            raise BundleError("truth_masks must match the frame array shape")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class StudyBundle:
    study_id: str
    videos: list[EchoVideo]
    manual_reference: dict[str, float] = field(default_factory=dict)
    body_surface_area: float | None = None
    patient_id: str | None = None
    acquisition_date: _dt.date | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.videos:
            raise BundleError("a bundle must contain at least one video")


@dataclass(frozen=True)
class StaticPixelMask:
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def _parse_date(value):
    if value in (None, ""):
        return None
    if isinstance(value, _dt.date):
        return value
    try:
        return _dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise BundleError(f"bad acquisition_date {value!r}") from exc


def _positive(entry: dict, key: str) -> float:
    if key not in entry:
        raise BundleError(f"manifest entry missing {key!r}")
    value = float(entry[key])
    if not value > 0:
        raise BundleError(f"{key} must be positive, got {entry[key]!r}")
    return value


def _read_raw(path: Path, shape: tuple[int, int, int]) -> np.ndarray:
    if not path.is_file():
        raise BundleError(f"missing binary {path}")
    expected = int(np.prod(shape))
    data = path.read_bytes()
    if len(data) != expected:
        raise BundleError(
            f"{path.name}: expected {expected} bytes for T,H,W={shape}, found {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(shape).copy()


def load_bundle(path: str | Path) -> StudyBundle:
    """Read a bundle directory and validate every video against its manifest."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"manifest is not valid JSON: {exc}") from exc

    study_id = str(manifest.get("study_id") or root.name)
    bsa = manifest.get("bsa_m2")
    if bsa is not None:
        bsa = float(bsa)
        if not bsa > 0:
            raise BundleError(f"bsa_m2 must be positive, got {manifest['bsa_m2']!r}")
    date = _parse_date(manifest.get("acquisition_date"))

    entries = manifest.get("videos") or []
    if not entries:
        raise BundleError("manifest lists no videos")
    videos = []
    for entry in entries:
        shape = (int(entry["frames"]), int(entry["rows"]), int(entry["cols"]))
        if min(shape) <= 0:
            raise BundleError(f"{entry.get('file')}: non-positive dimensions {shape}")
        meta = StudyMetadata(
            study_id=study_id,
            frame_interval=_positive(entry, "frame_interval_s"),
            heart_rate=_positive(entry, "heart_rate_bpm"),
            rows=shape[1],
            cols=shape[2],
            pixel_spacing_x=_positive(entry, "px_cm_x"),
            pixel_spacing_y=_positive(entry, "px_cm_y"),
            body_surface_area=bsa,
            acquisition_date=date,
        )
        frames = _read_raw(root / entry["file"], shape)
        masks = None
        if entry.get("masks"):
            masks = _read_raw(root / entry["masks"], shape)
        videos.append(
            EchoVideo(
                frames=frames,
                metadata=meta,
                view_label=entry.get("view"),
                truth_masks=masks,
                name=str(entry["file"]),
            )
        )

    reference = {str(k): float(v) for k, v in (manifest.get("manual_reference") or {}).items()}
    known = {"study_id", "bsa_m2", "videos", "manual_reference", "patient_id", "acquisition_date"}
    extra = {k: v for k, v in manifest.items() if k not in known}
    return StudyBundle(
        study_id=study_id,
        videos=videos,
        manual_reference=reference,
        body_surface_area=bsa,
        patient_id=manifest.get("patient_id"),
        acquisition_date=date,
        extra=extra,
    )


def write_bundle(bundle: StudyBundle, path: str | Path) -> Path:
    """Write ``bundle`` as a manifest plus raw binaries; returns the directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, video in enumerate(bundle.videos):
        stem = Path(video.name).stem if video.name else f"video_{i:03d}"
        fname = f"{stem}.raw"
        frames = np.asarray(video.frames)
        if frames.dtype != np.uint8:
            frames = np.clip(np.rint(frames), 0, 255).astype(np.uint8)
        (root / fname).write_bytes(np.ascontiguousarray(frames).tobytes())
        meta = video.metadata
        entry = {
            "file": fname,
            "frames": int(frames.shape[0]),
            "rows": int(frames.shape[1]),
            "cols": int(frames.shape[2]),
            "frame_interval_s": meta.frame_interval,
            "heart_rate_bpm": meta.heart_rate,
            "px_cm_x": meta.pixel_spacing_x,
            "px_cm_y": meta.pixel_spacing_y,
        }
        if video.view_label is not None:
            entry["view"] = str(video.view_label)
        if video.truth_masks is not None:
            mname = f"{stem}.masks.raw"
            masks = np.ascontiguousarray(video.truth_masks, dtype=np.uint8)
            (root / mname).write_bytes(masks.tobytes())
            entry["masks"] = mname
        entries.append(entry)

    manifest: dict[str, Any] = dict(bundle.extra)
    manifest.update({"study_id": bundle.study_id, "bsa_m2": bundle.body_surface_area, "videos": entries})
    if bundle.manual_reference:
        manifest["manual_reference"] = dict(bundle.manual_reference)
    if bundle.patient_id is not None:
        manifest["patient_id"] = bundle.patient_id
    if bundle.acquisition_date is not None:
        manifest["acquisition_date"] = bundle.acquisition_date.isoformat()
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return root


def sample_frame_indices(n_frames: int, count: int) -> np.ndarray:
    """``count`` frame indices evenly spaced over ``[0, n_frames - 1]``."""
    return np.unique(np.rint(np.linspace(0, n_frames - 1, count)).astype(int))


def compute_static_mask(video: EchoVideo, sample_count: int = 10, static_fraction: float = 0.8) -> StaticPixelMask:
    """Flag pixels whose intensity stays put across most sampled frames.

    ``sample_count`` frames are taken evenly spaced over the video; a pixel is
    static when it is exactly equal in at least ``static_fraction`` of the
    consecutive sampled-frame pairs.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    if not 0 < static_fraction <= 1:
        raise ValueError("static_fraction must be in (0, 1]")
    if video.n_frames < sample_count:
        raise ValueError(f"video has {video.n_frames} frames, fewer than sample_count={sample_count}")

    idx = sample_frame_indices(video.n_frames, sample_count)
    sampled = np.asarray(video.frames)[idx]
    same = sampled[1:] == sampled[:-1]
    n_pairs = same.shape[0]
    # integer comparison avoids float rounding at the fraction boundary
    needed = int(np.ceil(static_fraction * n_pairs - 1e-9))
    return StaticPixelMask(mask=same.sum(axis=0) >= needed)


def apply_static_mask(video: EchoVideo, mask: StaticPixelMask) -> EchoVideo:
    if mask.mask.shape != video.shape:
        raise ValueError(f"mask shape {mask.mask.shape} does not match video {video.shape}")
    frames = np.array(video.frames, copy=True)
    frames[:, mask.mask] = 0
    return replace(video, frames=frames)
