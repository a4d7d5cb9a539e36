"""Physical measurements of binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mask_area(mask: np.ndarray, spacing_x: float, spacing_y: float) -> float:
    """Area in cm^2: pixel count times the physical pixel footprint."""
    return float(np.count_nonzero(mask)) * spacing_x * spacing_y


@dataclass(frozen=True)
class PrincipalAxis:
    """Long axis of a pixel set in physical (cm) coordinates.

    ``direction`` is a unit vector in (x, y) order with a non-negative y
    component, so the axis runs from ``start`` (top of the image) down.
    ``start`` is the axis origin projected to the first pixel edge and
    ``length`` the full extent including one pixel footprint.
    """

    centroid: np.ndarray
    direction: np.ndarray
    start: float
    length: float

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    def axial_fraction(self, xy_cm: np.ndarray) -> np.ndarray:
        """Position along the axis as a fraction of its length (0 at start)."""
        proj = (np.asarray(xy_cm) - self.centroid) @ self.direction
        return (proj - self.start) / self.length

    def lateral(self, xy_cm: np.ndarray) -> np.ndarray:
        """Signed distance (cm) from the axis line."""
        return (np.asarray(xy_cm) - self.centroid) @ self.normal


def pixel_coords_cm(mask: np.ndarray, spacing_x: float, spacing_y: float) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.column_stack([cols * spacing_x, rows * spacing_y]).astype(float)


def principal_axis(mask: np.ndarray, spacing_x: float, spacing_y: float) -> PrincipalAxis:
    pts = pixel_coords_cm(mask, spacing_x, spacing_y)
    if len(pts) < 2:
        raise ValueError("need at least two pixels to define an axis")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    direction = evecs[:, int(np.argmax(evals))]
    if direction[1] < 0 or (direction[1] == 0 and direction[0] < 0):
        direction = -direction
    proj = centered @ direction
    footprint = abs(direction[0]) * spacing_x + abs(direction[1]) * spacing_y
    start = proj.min() - footprint / 2
    length = proj.max() - proj.min() + footprint
    return PrincipalAxis(centroid=centroid, direction=direction, start=float(start), length=float(length))


def long_axis_length(mask: np.ndarray, spacing_x: float, spacing_y: float) -> float:
    """Extent of the mask along its first principal component, in cm."""
    if np.count_nonzero(mask) == 0:
        return 0.0
    if np.count_nonzero(mask) == 1:
        return float(min(spacing_x, spacing_y))
    return principal_axis(mask, spacing_x, spacing_y).length
