"""Order-statistic helpers shared by every module.

One percentile convention is used throughout: linear interpolation between
the closest order statistics (rank ``(n - 1) * q / 100``).  The median of an
even-sized sample is the plain mean of the two central values.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np


def percentile(values: Iterable[float], q: float) -> float:
    x = np.sort(np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 <= q <= 100:
        raise ValueError(f"q must be in [0, 100], got {q}")
    h = (n - 1) * q / 100.0
    lo = int(math.floor(h))
    frac = h - lo
    if lo >= n - 1:
        return float(x[n - 1])
    if frac == 0.0:
        return float(x[lo])
    return float(x[lo] + (x[lo + 1] - x[lo]) * frac)


def median(values: Iterable[float]) -> float:
    x = np.sort(np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("median of an empty sample")
    mid = n // 2
    if n % 2:
        return float(x[mid])
    return float((x[mid - 1] + x[mid]) / 2.0)


def nearest_index(values: np.ndarray, target: float) -> int:
    """First index whose value is closest to ``target``."""
    return int(np.argmin(np.abs(np.asarray(values, dtype=float) - target)))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))
