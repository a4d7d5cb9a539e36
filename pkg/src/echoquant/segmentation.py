"""Segmentation contract, backends and IoU scoring."""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Protocol

import numpy as np

from .bundle import EchoVideo
from .views import ViewLabel


class StructureLabel(IntEnum):
    """Label-map ordinals; 0 is background."""

    LA_BLOOD = 1
    LV_BLOOD = 2
    LV_MUSCLE = 3
    RA_BLOOD = 4
    RV_BLOOD = 5
    OUTER_BOUNDARY = 6
    AORTIC_ROOT = 7
    ANTERIOR_SEPTUM = 8
    POSTERIOR_WALL = 9


BACKGROUND = 0

VIEW_STRUCTURES: dict[ViewLabel, frozenset[StructureLabel]] = {
    ViewLabel.A2C: frozenset(
        {StructureLabel.LA_BLOOD, StructureLabel.LV_BLOOD, StructureLabel.LV_MUSCLE, StructureLabel.OUTER_BOUNDARY}
    ),
    ViewLabel.A4C: frozenset(
        {
            StructureLabel.LA_BLOOD,
            StructureLabel.LV_BLOOD,
            StructureLabel.LV_MUSCLE,
            StructureLabel.RA_BLOOD,
            StructureLabel.RV_BLOOD,
            StructureLabel.OUTER_BOUNDARY,
        }
    ),
    ViewLabel.PLAX: frozenset(
        {
            StructureLabel.LA_BLOOD,
            StructureLabel.RV_BLOOD,
            StructureLabel.AORTIC_ROOT,
            StructureLabel.OUTER_BOUNDARY,
            StructureLabel.ANTERIOR_SEPTUM,
            StructureLabel.POSTERIOR_WALL,
        }
    ),
    ViewLabel.PSAX: frozenset({StructureLabel.LV_BLOOD, StructureLabel.LV_MUSCLE, StructureLabel.RV_BLOOD}),
}

SEGMENTED_VIEWS = tuple(VIEW_STRUCTURES)


class SegmentationError(RuntimeError):
    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message if frame_index is None else f"frame {frame_index}: {message}")
        self.frame_index = frame_index


@dataclass(frozen=True)
class FrameSegmentation:
    label_map: np.ndarray
    view: ViewLabel

    def __post_init__(self):
        allowed = {BACKGROUND, *(int(s) for s in VIEW_STRUCTURES.get(self.view, ()))}
        present = set(np.unique(self.label_map).tolist())
        stray = present - allowed
        if stray:
            raise SegmentationError(f"labels {sorted(stray)} are not defined for view {self.view}")

    def region(self, label: StructureLabel) -> np.ndarray:
        return self.label_map == int(label)

    @property
    def shape(self) -> tuple[int, int]:
        return self.label_map.shape


class SegmentationBackend(Protocol):
    def segment(self, video: EchoVideo, view: ViewLabel) -> list[np.ndarray]:
        """Return one H x W uint8 label map per frame."""
        ...


class PhantomOracleBackend:
    """Returns the ground-truth label maps stored alongside phantom videos."""

    def segment(self, video: EchoVideo, view: ViewLabel) -> list[np.ndarray]:
        if video.truth_masks is None:
            raise SegmentationError("video carries no ground-truth masks")
        return [np.asarray(m, dtype=np.uint8) for m in video.truth_masks]


@dataclass(frozen=True)
class ExternalSegmentationBackend:
    """Out-of-process segmentation.

    ``command`` is invoked per frame as ``command... VIEW IN_PNG OUT_PNG``; the
    output PNG is a label image whose pixel (palette) indices are
    ``StructureLabel`` ordinals.
    """

    command: tuple[str, ...]
    timeout: float = 120.0

    def segment(self, video: EchoVideo, view: ViewLabel) -> list[np.ndarray]:
        out = []
        with tempfile.TemporaryDirectory() as tmp:
            for i in range(video.n_frames):
                src = Path(tmp) / "frame.png"
                dst = Path(tmp) / "labels.png"
                write_label_png(np.asarray(video.frames[i], dtype=np.uint8), src)
                try:
                    subprocess.run(
                        [*self.command, str(view), str(src), str(dst)],
                        capture_output=True,
                        timeout=self.timeout,
                        check=True,
                    )
                    out.append(read_label_png(dst))
                except Exception as exc:
                    raise SegmentationError(str(exc), frame_index=i) from exc
        return out


def segment_video(backend: SegmentationBackend, video: EchoVideo, view) -> list[FrameSegmentation]:
    view = ViewLabel.parse(view)
    if view not in VIEW_STRUCTURES:
        raise SegmentationError(f"no segmentation model for view {view}")
    maps = backend.segment(video, view)
    if len(maps) != video.n_frames:
        raise SegmentationError(f"backend returned {len(maps)} masks for {video.n_frames} frames")
    result = []
    for i, m in enumerate(maps):
        m = np.asarray(m)
        if m.shape != video.shape:
            raise SegmentationError(f"mask shape {m.shape} != frame shape {video.shape}", frame_index=i)
        try:
            result.append(FrameSegmentation(m.astype(np.uint8, copy=False), view))
        except SegmentationError as exc:
            raise SegmentationError(str(exc), frame_index=i) from exc
    return result


def compute_iou(predicted, truth, label: StructureLabel) -> float:
    """Intersection over union of one structure; two empty sets score 1."""
    p = predicted.label_map if isinstance(predicted, FrameSegmentation) else np.asarray(predicted)
    t = truth.label_map if isinstance(truth, FrameSegmentation) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    a = p == int(label)
    b = t == int(label)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mean_iou_by_structure(predicted: list[FrameSegmentation], truth: list[FrameSegmentation]) -> dict[str, float]:
    """Per-structure IoU averaged over frames (Table-style accuracy summary)."""
    if len(predicted) != len(truth) or not truth:
        raise ValueError("need equal, non-empty frame lists")
    labels = sorted(VIEW_STRUCTURES[truth[0].view])
    return {
        s.name: float(np.mean([compute_iou(p, t, s) for p, t in zip(predicted, truth)])) for s in labels
    }


def write_label_png(label_map: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(label_map, dtype=np.uint8)).save(path)


def read_label_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            img = img.convert("L")
        return np.array(img, dtype=np.uint8)


def write_label_raw(maps, path: str | Path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(np.asarray(maps, dtype=np.uint8)).tobytes())


def read_label_raw(path: str | Path, shape: tuple[int, ...]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(shape).copy()
