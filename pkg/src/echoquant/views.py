"""View classification interfaces, quality score and routing."""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .bundle import EchoVideo, StudyBundle, sample_frame_indices
from .numerics import median

logger = logging.getLogger(__name__)


class ViewLabel(str, Enum):
    PLAX = "PLAX"
    PSAX = "PSAX"
    A2C = "A2c"
    A3C = "A3c"
    A4C = "A4c"
    IVC = "IVC"
    OTHER = "OTHER"
    A2C_OCCLUDED_LA = "A2c_OCCLUDED_LA"
    A4C_OCCLUDED_LA = "A4c_OCCLUDED_LA"

    @classmethod
    def parse(cls, value) -> "ViewLabel":
        if isinstance(value, cls):
            return value
        if value is None:
            return cls.OTHER
        for member in cls:
            if member.value.lower() == str(value).lower() or member.name == str(value).upper():
                return member
        return cls.OTHER

    def __str__(self):
        return self.value


VIEW_CLASSES: tuple[ViewLabel, ...] = tuple(ViewLabel)
QUANTIFIED_VIEWS = (ViewLabel.PLAX, ViewLabel.PSAX, ViewLabel.A2C, ViewLabel.A4C)
MAX_CLASSIFIED_FRAMES = 10


@dataclass(frozen=True)
class ViewPrediction:
    probabilities: dict[ViewLabel, float]
    assigned_view: ViewLabel
    assigned_probability: float
    error: str | None = None

    @classmethod
    def from_distribution(cls, dist: np.ndarray, classes: Sequence[ViewLabel] = VIEW_CLASSES) -> "ViewPrediction":
        dist = np.asarray(dist, dtype=float)
        if dist.shape != (len(classes),) or np.any(dist < 0) or not dist.sum() > 0:
            raise ValueError(f"invalid class distribution {dist!r}")
        dist = dist / dist.sum()
        best = int(np.argmax(dist))
        return cls(
            probabilities={c: float(p) for c, p in zip(classes, dist)},
            assigned_view=classes[best],
            assigned_probability=float(dist[best]),
        )

    @classmethod
    def failed(cls, message: str) -> "ViewPrediction":
        return cls(probabilities={}, assigned_view=ViewLabel.OTHER, assigned_probability=0.0, error=message)

    def to_dict(self) -> dict:
        out = {
            "view": self.assigned_view.value,
            "probability": self.assigned_probability,
            "probabilities": {k.value: v for k, v in self.probabilities.items()},
        }
        if self.error:
            out["error"] = self.error
        return out


class ViewClassifier(Protocol):
    """Anything that maps selected frames of a video to class distributions.

    ``predict_frames`` returns an array of shape (len(indices), len(VIEW_CLASSES)).
    """

    def predict_frames(self, video: EchoVideo, indices: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class MockClassifier:
    """Reads the ground-truth view label and emits a fixed-confidence distribution.

    The remaining ``1 - confidence`` is spread uniformly over the other
    classes.  Labels listed in ``relabel`` are reported as another class,
    which is handy for planting misclassifications.
    """

    confidence: float = 1.0
    relabel: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.confidence <= 1:
            raise ValueError("confidence must be in (0, 1]")

    def predict_frames(self, video: EchoVideo, indices: np.ndarray) -> np.ndarray:
        label = ViewLabel.parse(self.relabel.get(str(video.view_label), video.view_label))
        k = len(VIEW_CLASSES)
        row = np.full(k, (1.0 - self.confidence) / (k - 1))
        row[VIEW_CLASSES.index(label)] = self.confidence
        return np.tile(row, (len(indices), 1))


@dataclass(frozen=True)
class ExternalClassifier:
    """Out-of-process classifier.

    ``command`` is run once per frame with the path of a grayscale PNG as
    its last argument and must print a JSON object mapping view names to
    probabilities on standard output.
    """

    command: tuple[str, ...]
    timeout: float = 60.0

    def predict_frames(self, video: EchoVideo, indices: np.ndarray) -> np.ndarray:
        from PIL import Image

        rows = []
        with tempfile.TemporaryDirectory() as tmp:
            for i in indices:
                png = Path(tmp) / f"frame_{int(i):05d}.png"
                Image.fromarray(np.asarray(video.frames[i], dtype=np.uint8)).save(png)
                proc = subprocess.run(
                    [*self.command, str(png)], capture_output=True, text=True, timeout=self.timeout, check=True
                )
                payload = json.loads(proc.stdout)
                row = np.zeros(len(VIEW_CLASSES))
                for name, p in payload.items():
                    row[VIEW_CLASSES.index(ViewLabel.parse(name))] += float(p)
                rows.append(row)
        return np.asarray(rows)


def classify_video(classifier: ViewClassifier, video: EchoVideo) -> ViewPrediction:
    """Average per-frame distributions over up to ten evenly spaced frames."""
    indices = sample_frame_indices(video.n_frames, min(MAX_CLASSIFIED_FRAMES, video.n_frames))
    try:
        per_frame = np.asarray(classifier.predict_frames(video, indices), dtype=float)
        if per_frame.shape != (len(indices), len(VIEW_CLASSES)):
            raise ValueError(f"classifier returned shape {per_frame.shape}")
        return ViewPrediction.from_distribution(per_frame.mean(axis=0))
    except Exception as exc:  # noqa: BLE001 - a failing video must not sink the study
        logger.warning("view classification failed for %s: %s", video.name or "<video>", exc)
        return ViewPrediction.failed(f"{type(exc).__name__}: {exc}")


def classify_study(classifier: ViewClassifier, bundle: StudyBundle) -> list[ViewPrediction]:
    return [classify_video(classifier, v) for v in bundle.videos]


def compute_vpqs(predictions: Sequence[ViewPrediction]) -> float:
    """Median assigned-class probability over the study's videos."""
    if not predictions:
        raise ValueError("cannot compute VPQS of an empty study")
    return median([p.assigned_probability for p in predictions])


def route_views(predictions: Sequence[ViewPrediction], bundle: StudyBundle | None = None) -> dict[ViewLabel, list[int]]:
    """Group video indices by assigned view, keeping only the quantified views."""
    if bundle is not None and len(bundle.videos) != len(predictions):
        raise ValueError("predictions do not align with bundle videos")
    routes: dict[ViewLabel, list[int]] = {}
    for i, pred in enumerate(predictions):
        if pred.error is None and pred.assigned_view in QUANTIFIED_VIEWS:
            routes.setdefault(pred.assigned_view, []).append(i)
    return routes


def confusion_matrix(predicted, truth, classes: Sequence[ViewLabel] = VIEW_CLASSES) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    predicted = list(predicted)
    truth = list(truth)
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} labels")
    index = {c: i for i, c in enumerate(classes)}
    out = np.zeros((len(classes), len(classes)), dtype=int)
    for p, t in zip(predicted, truth):
        if isinstance(p, ViewPrediction):
            p = p.assigned_view
        out[index[ViewLabel.parse(t)], index[ViewLabel.parse(p)]] += 1
    return out
