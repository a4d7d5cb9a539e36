"""Agreement, consistency and trajectory statistics.

All percentiles follow :func:`echoquant.numerics.percentile`.  Randomness
comes only from ``numpy.random.SeedSequence(seed)``.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import interpolate
from scipy import stats as sps

from .numerics import median, percentile

TRAJECTORY_THRESHOLD = 16.0
N_VIDEOS_CAP = 15
BOOTSTRAP_ITERATIONS = 10_000


@dataclass(frozen=True)
class AgreementSummary:
    n: int
    median_difference: float
    band50: float
    band75: float
    band95: float
    manual_median: float
    manual_q25: float
    manual_q75: float
    differences: tuple[float, ...] = field(default=(), repr=False)
    means: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "median_difference": self.median_difference,
            "abs_deviation_percentiles": {"50": self.band50, "75": self.band75, "95": self.band95},
            "manual_median": self.manual_median,
            "manual_iqr": [self.manual_q25, self.manual_q75],
        }


def bland_altman_summary(auto, manual) -> AgreementSummary:
    """Median of auto - manual and percentiles of its absolute value."""
    a = np.asarray(auto, dtype=float)
    m = np.asarray(manual, dtype=float)
    if a.shape != m.shape or a.ndim != 1:
        raise ValueError(f"paired 1-D inputs required, got {a.shape} and {m.shape}")
    if a.size == 0:
        raise ValueError("need at least one pair")
    d = a - m
    ad = np.abs(d)
    return AgreementSummary(
        n=int(a.size),
        median_difference=median(d),
        band50=percentile(ad, 50),
        band75=percentile(ad, 75),
        band95=percentile(ad, 95),
        manual_median=median(m),
        manual_q25=percentile(m, 25),
        manual_q75=percentile(m, 75),
        differences=tuple(float(x) for x in d),
        means=tuple(float(x) for x in (a + m) / 2),
    )


def midranks(x) -> np.ndarray:
    """1-based ranks with ties replaced by the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(rx: np.ndarray, ry: np.ndarray) -> float | None:
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def spearman(x, y) -> float | None:
    """Rank correlation; None when either side has no rank variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired 1-D inputs required")
    if len(x) < 3:
        raise ValueError(f"need at least 3 pairs, got {len(x)}")
    return _pearson(midranks(x), midranks(y))


def _rowwise_spearman(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Spearman per row of (B, n) arrays; rows with a constant side give NaN."""
    rx = sps.rankdata(x, axis=1)
    ry = sps.rankdata(y, axis=1)
    rx -= rx.mean(axis=1, keepdims=True)
    ry -= ry.mean(axis=1, keepdims=True)
    num = np.einsum("ij,ij->i", rx, ry)
    den = np.sqrt(np.einsum("ij,ij->i", rx, rx) * np.einsum("ij,ij->i", ry, ry))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(r, -1.0, 1.0)


@dataclass(frozen=True)
class ConsistencyDataset:
    name: str
    auto_x: np.ndarray
    auto_y: np.ndarray
    manual_x: np.ndarray
    manual_y: np.ndarray

    def __post_init__(self):
        n = len(self.auto_x)
        if n == 0:
            raise ValueError(f"dataset {self.name} is empty")
        if not (len(self.auto_y) == len(self.manual_x) == len(self.manual_y) == n):
            raise ValueError(f"dataset {self.name}: columns differ in length")

    @classmethod
    def from_mapping(cls, name: str, data: dict) -> "ConsistencyDataset":
        return cls(name, *(np.asarray(data[k], dtype=float) for k in ("auto_x", "auto_y", "manual_x", "manual_y")))


@dataclass
class ConsistencyResult:
    names: list[str]
    rho_auto: list[float | None]
    rho_manual: list[float | None]
    observed_delta: float
    mean_delta: float
    p_value: float
    iterations: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "pairs": [{"name": n, "rho_auto": a, "rho_manual": m}
                      for n, a, m in zip(self.names, self.rho_auto, self.rho_manual)],
            "observed_delta": self.observed_delta,
            "mean_delta": self.mean_delta,
            "p_value": self.p_value,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def _abs_or_zero(r: float | None) -> float:
    return 0.0 if r is None else abs(r)


def consistency_bootstrap(datasets: Sequence[ConsistencyDataset] | dict, iterations: int = BOOTSTRAP_ITERATIONS,
                          seed: int = 0, chunk: int = 1000) -> ConsistencyResult:
    """Bootstrap test that automated pairs correlate more strongly than manual ones.

    Each dataset is resampled independently from its own child stream of
    ``SeedSequence(seed)``; automated and manual columns share the row draw.
    Per iteration Delta is the mean over datasets of |rho_auto| - |rho_manual|
    with an undefined rho counted as 0, and p is the fraction of Delta <= 0.
    """
    if isinstance(datasets, dict):
        datasets = [ConsistencyDataset.from_mapping(k, v) for k, v in datasets.items()]
    datasets = list(datasets)
    if not datasets:
        raise ValueError("no datasets")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(datasets))]
    delta = np.zeros(iterations)
    for ds, rng in zip(datasets, streams):
        n = len(ds.auto_x)
        for start in range(0, iterations, chunk):
            b = min(chunk, iterations - start)
            idx = rng.integers(0, n, size=(b, n))
            ra = np.nan_to_num(np.abs(_rowwise_spearman(ds.auto_x[idx], ds.auto_y[idx])), nan=0.0)
            rm = np.nan_to_num(np.abs(_rowwise_spearman(ds.manual_x[idx], ds.manual_y[idx])), nan=0.0)
            delta[start:start + b] += ra - rm
    delta /= len(datasets)

    def _rho(x, y):
        return spearman(x, y) if len(x) >= 3 else None

    rho_a = [_rho(d.auto_x, d.auto_y) for d in datasets]
    rho_m = [_rho(d.manual_x, d.manual_y) for d in datasets]
    observed = float(np.mean([_abs_or_zero(a) - _abs_or_zero(m) for a, m in zip(rho_a, rho_m)]))
    return ConsistencyResult(
        names=[d.name for d in datasets],
        rho_auto=rho_a,
        rho_manual=rho_m,
        observed_delta=observed,
        mean_delta=float(delta.mean()),
        p_value=float(np.count_nonzero(delta <= 0) / iterations),
        iterations=iterations,
        seed=seed,
    )


@dataclass
class RegressionResult:
    names: tuple[str, ...]
    coefficients: np.ndarray
    stderr: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    residuals: np.ndarray
    design: np.ndarray
    dof: int
    sigma: float

    def to_dict(self) -> dict:
        return {
            name: {"coef": float(c), "stderr": float(s), "t": float(t), "p": float(p)}
            for name, c, s, t, p in zip(self.names, self.coefficients, self.stderr, self.t_values, self.p_values)
        } | {"dof": self.dof, "sigma": self.sigma}


def deviation_design(vpqs, n_videos, cap: int = N_VIDEOS_CAP) -> np.ndarray:
    v = np.asarray(vpqs, dtype=float)
    n = np.minimum(np.asarray(n_videos, dtype=float), cap)
    return np.column_stack([np.ones(len(v)), v, n])


def deviation_regression(abs_dev, vpqs, n_videos, cap: int = N_VIDEOS_CAP) -> RegressionResult:
    """OLS of sqrt|deviation| on an intercept, VPQS and the capped video count.

    Standard errors and two-sided p-values follow the Gaussian linear model
    (t distribution with n - 3 degrees of freedom).
    """
    y = np.sqrt(np.abs(np.asarray(abs_dev, dtype=float)))
    X = deviation_design(vpqs, n_videos, cap)
    if X.shape[0] != len(y):
        raise ValueError("inputs differ in length")
    if len(y) < 10:
        raise ValueError(f"need at least 10 observations, got {len(y)}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = len(y) - X.shape[1]
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.inf * np.sign(beta))
    p = 2 * sps.t.sf(np.abs(t), dof)
    return RegressionResult(("intercept", "vpqs", "n_videos"), beta, se, t, p, resid, X, dof, float(np.sqrt(sigma2)))


@dataclass
class TrajectoryFit:
    dates: list[_dt.date]
    days: np.ndarray
    strain: np.ndarray
    grid_days: np.ndarray
    grid_values: np.ndarray
    method: str
    lam: float | None
    threshold: float = TRAJECTORY_THRESHOLD
    therapy_events: list[dict] = field(default_factory=list)
    spline: object = field(default=None, repr=False, compare=False)

    def evaluate(self, days) -> np.ndarray:
        if self.spline is None:
            return np.interp(days, self.grid_days, self.grid_values)
        return np.asarray(self.spline(np.asarray(days, dtype=float)), dtype=float)

    def to_dict(self) -> dict:
        return {
            "points": [{"date": d.isoformat(), "day": float(x), "strain": float(s)}
                       for d, x, s in zip(self.dates, self.days, self.strain)],
            "grid": {"day": [float(x) for x in self.grid_days], "value": [float(v) for v in self.grid_values]},
            "method": self.method,
            "lam": self.lam,
            "threshold": self.threshold,
            "therapy_events": list(self.therapy_events),
        }


def _as_date(value) -> _dt.date:
    if isinstance(value, _dt.datetime):
        return value.date()
    if isinstance(value, _dt.date):
        return value
    return _dt.date.fromisoformat(str(value))


def strain_trajectory(points, therapy_events: Sequence[dict] = (), lam: float | None = None,
                      grid_size: int = 200, threshold: float = TRAJECTORY_THRESHOLD) -> TrajectoryFit:
    """Cubic smoothing spline of strain against days since the first study.

    ``lam`` is the roughness penalty; None picks it by generalized
    cross-validation.  Fewer than five distinct dates fall back to a natural
    interpolating cubic.  Strains measured on the same date are averaged.
    """
    pts = sorted((_as_date(d), float(s)) for d, s in points)
    if len(pts) < 2:
        raise ValueError("need at least 2 dated strain values")
    dates: list[_dt.date] = []
    values: list[list[float]] = []
    for d, s in pts:
        if dates and dates[-1] == d:
            values[-1].append(s)
        else:
            dates.append(d)
            values.append([s])
    if len(dates) < 2:
        raise ValueError("need at least 2 distinct dates")
    y = np.array([np.mean(v) for v in values])
    x = np.array([(d - dates[0]).days for d in dates], dtype=float)
    grid = np.linspace(x[0], x[-1], grid_size)
    if len(x) >= 5:
        spline = interpolate.make_smoothing_spline(x, y, lam=lam)
        method = "smoothing"
        used_lam = lam
    else:
        spline = interpolate.CubicSpline(x, y, bc_type="natural")
        method = "interpolating"
        used_lam = 0.0
    return TrajectoryFit(
        dates=dates,
        days=x,
        strain=y,
        grid_days=grid,
        grid_values=np.asarray(spline(grid), dtype=float),
        method=method,
        lam=used_lam,
        threshold=threshold,
        therapy_events=[dict(e) for e in therapy_events],
        spline=spline,
    )
