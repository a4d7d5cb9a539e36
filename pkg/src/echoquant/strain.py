"""Longitudinal strain by speckle tracking along the LV long axis.

For every consecutive frame pair the LV blood pool of the earlier frame
defines the long axis and a band of pixels around the endocardial border,
split into two hemi-ventricles.  Bright speckles are detected in each band,
matched into the next frame by normalized cross-correlation inside a
velocity-bounded search square, and their axial displacements are fitted by
a cubic in axial position.  The fitted slope is the per-frame strain
increment; increments are median-smoothed in time and summed.

Axial positions are fractions of the current frame's long-axis length while
displacements are scaled by the first frame's length, so that summing the
increments of a uniform field telescopes to the Lagrangian strain
(L_t - L_0) / L_0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .geometry import PrincipalAxis, principal_axis
from .numerics import median

logger = logging.getLogger(__name__)

BASE_THRESHOLD = 0.85
SUBPIXEL_METHODS = ("none", "parabolic", "iterative")


class StrainError(ValueError):
    pass


@dataclass(frozen=True)
class StrainConfig:
    patch_size: int = 17
    diameter: int = 5
    min_separation: int = 3
    max_velocity: float = 12.0  # cm/s
    threshold: float = BASE_THRESHOLD
    threshold_step: float = 0.05
    threshold_floor: float = 0.5
    min_particles: int = 10
    quality_floor: float = 8.0
    n_positions: int = 28
    position_range: tuple[float, float] = (0.05, 0.95)
    band_width: int = 8  # px outside the blood pool
    inner_band: int = 2  # px inside the blood pool
    smoothing_window: int = 3
    subpixel: str = "iterative"
    min_lv_pixels: int = 50

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")
        if self.diameter < 3 or self.diameter % 2 == 0:
            raise ValueError("diameter must be odd and >= 3")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if not 0 < self.threshold_floor <= self.threshold:
            raise ValueError("threshold_floor must be in (0, threshold]")
        if self.min_particles < 4:
            raise ValueError("min_particles must be >= 4 for a cubic fit")
        if self.max_velocity <= 0:
            raise ValueError("max_velocity must be positive")
        if self.subpixel not in SUBPIXEL_METHODS:
            raise ValueError(f"subpixel must be one of {SUBPIXEL_METHODS}")

    @property
    def positions(self) -> np.ndarray:
        lo, hi = self.position_range
        return np.linspace(lo, hi, self.n_positions)


@dataclass(frozen=True)
class HemiVentricleROI:
    side: str  # "medial" or "lateral"
    axis: PrincipalAxis
    mask: np.ndarray


def _lv_mask(seg) -> np.ndarray:
    from .segmentation import StructureLabel

    if hasattr(seg, "label_map"):
        return seg.label_map == StructureLabel.LV_BLOOD
    arr = np.asarray(seg)
    return arr if arr.dtype == bool else arr == StructureLabel.LV_BLOOD


def split_hemiventricle(lv_mask, spacing_x: float = 1.0, spacing_y: float = 1.0, band_width: int = 8,
                        inner_band: int = 2, min_pixels: int = 50) -> tuple[HemiVentricleROI, HemiVentricleROI]:
    """Split the endocardial border band into two halves along the long axis.

    Pixels lying exactly on the axis go to the medial half so the two masks
    partition the band.
    """
    lv = _lv_mask(lv_mask)
    n = int(np.count_nonzero(lv))
    if n < min_pixels:
        raise StrainError(f"LV blood pool has {n} pixels, need at least {min_pixels}")
    axis = principal_axis(lv, spacing_x, spacing_y)
    outside = ndimage.distance_transform_edt(~lv)
    inside = ndimage.distance_transform_edt(lv)
    band = (~lv & (outside <= band_width)) | (lv & (inside <= inner_band))
    rows, cols = np.indices(lv.shape)
    xy = np.stack([cols * spacing_x, rows * spacing_y], axis=-1).reshape(-1, 2)
    lateral = axis.lateral(xy).reshape(lv.shape)
    tol = 1e-9 * max(spacing_x, spacing_y)
    medial = band & (lateral > -tol)
    return (
        HemiVentricleROI("medial", axis, medial),
        HemiVentricleROI("lateral", axis, band & ~medial),
    )


def detect_speckles(frame: np.ndarray, roi: np.ndarray | None = None, diameter: int = 5, min_separation: float = 3,
                    min_intensity: float | None = None) -> np.ndarray:
    """Bright blob centres as integer (row, col) positions, brightest first.

    The frame is lightly smoothed, local maxima over a ``diameter`` window
    are kept, and candidates closer than ``min_separation`` to an already
    accepted brighter one are dropped.
    """
    if diameter < 3 or diameter % 2 == 0:
        raise ValueError("diameter must be odd and >= 3")
    if min_separation < 1:
        raise ValueError("min_separation must be >= 1")
    img = ndimage.gaussian_filter(np.asarray(frame, dtype=float), 1.0)
    region = np.ones(img.shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool)
    if not region.any():
        return np.empty((0, 2), dtype=int)
    if min_intensity is None:
        vals = img[region]
        min_intensity = vals.mean() + 0.5 * vals.std()
    peak = (img == ndimage.maximum_filter(img, size=diameter)) & (img > ndimage.minimum_filter(img, size=diameter))
    cand = peak & region & (img > max(min_intensity, 0.0))
    rr, cc = np.nonzero(cand)
    if rr.size == 0:
        return np.empty((0, 2), dtype=int)
    order = np.lexsort((cc, rr, -img[rr, cc]))
    pts = np.column_stack([rr[order], cc[order]])
    kept: list[int] = []
    sep2 = float(min_separation) ** 2
    for i, p in enumerate(pts):
        if kept:
            d = pts[kept] - p
            if np.min(np.einsum("ij,ij->i", d, d)) < sep2:
                continue
        kept.append(i)
    return pts[kept]


def ncc_surface(template: np.ndarray, search: np.ndarray) -> np.ndarray:
    """Zero-mean normalized cross-correlation of ``template`` at every valid offset.

    Same statistic as OpenCV's TM_CCOEFF_NORMED; flat windows score 0.
    """
    t = np.asarray(template, dtype=float)
    t = t - t.mean()
    tn = math.sqrt(float((t * t).sum()))
    win = sliding_window_view(np.asarray(search, dtype=float), t.shape)
    wm = win.mean(axis=(-2, -1), keepdims=True)
    wc = win - wm
    num = np.einsum("ijkl,kl->ij", wc, t)
    den = np.sqrt(np.einsum("ijkl,ijkl->ij", wc, wc)) * tn
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 1e-12, num / den, 0.0)
    return np.clip(out, -1.0, 1.0)


def _parabolic(lo: float, mid: float, hi: float) -> float:
    denom = lo - 2.0 * mid + hi
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def _refine_translation(coeffs: np.ndarray, template: np.ndarray, r: int, c: int, d0: np.ndarray,
                        iterations: int = 8, tol: float = 1e-4) -> np.ndarray | None:
    """Inverse-compositional Lucas-Kanade refinement of a translation.

    ``coeffs`` are cubic spline coefficients of the target frame.  Both
    patches are mean-subtracted so a uniform brightness offset is ignored.
    Returns None when the iteration diverges more than one pixel from ``d0``.
    """
    half = template.shape[0] // 2
    t = template - template.mean()
    gy, gx = np.gradient(t)
    J = np.column_stack([gy.ravel(), gx.ravel()])
    H = J.T @ J
    if np.linalg.cond(H) > 1e8:
        return None
    Hinv = np.linalg.inv(H)
    oy, ox = np.mgrid[-half:half + 1, -half:half + 1]
    d = d0.astype(float).copy()
    for _ in range(iterations):
        coords = np.array([(r + d[0] + oy).ravel(), (c + d[1] + ox).ravel()])
        warped = ndimage.map_coordinates(coeffs, coords, order=3, mode="nearest", prefilter=False)
        err = (warped - warped.mean()) - t.ravel()
        step = Hinv @ (J.T @ err)
        d -= step
        if np.max(np.abs(d - d0)) > 1.0:
            return None
        if np.max(np.abs(step)) < tol:
            break
    return d


@dataclass
class SpeckleTracks:
    positions: np.ndarray  # (N, 2) row, col in the first frame
    displacement: np.ndarray  # (N, 2) rows, cols; NaN when skipped
    score: np.ndarray  # (N,) best NCC; NaN when skipped
    threshold: float

    @property
    def tracked(self) -> np.ndarray:
        return np.isfinite(self.score)

    @property
    def accepted(self) -> np.ndarray:
        return self.tracked & (np.nan_to_num(self.score, nan=-2.0) >= self.threshold)


def search_radius(max_velocity: float, frame_interval: float, spacing: float) -> int:
    return int(math.ceil(max_velocity * frame_interval / spacing - 1e-12))


def track_speckles(frame_t: np.ndarray, frame_t1: np.ndarray, speckles: np.ndarray, patch_size: int = 17,
                   max_velocity: float = 12.0, frame_interval: float = 1 / 30, spacing_x: float = 0.1,
                   spacing_y: float | None = None, threshold: float = BASE_THRESHOLD,
                   subpixel: str = "iterative") -> SpeckleTracks:
    """Match each speckle's patch into the next frame.

    The search square has half-width ``ceil(max_velocity * dt / spacing)``
    pixels per axis.  Speckles whose patch leaves the frame are skipped;
    offsets whose window would leave the frame are not searched.  The score
    is always the integer-offset NCC peak.  ``subpixel`` then refines the
    offset (a perfect match keeps its integer offset): "parabolic" fits a parabola through the peak and its neighbours
    on each axis, "iterative" runs a Lucas-Kanade translation refinement on
    a cubic spline of ``frame_t1`` (falling back to the parabola), and
    "none" keeps the integer offset.
    """
    if subpixel not in SUBPIXEL_METHODS:
        raise ValueError(f"subpixel must be one of {SUBPIXEL_METHODS}")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    if max_velocity <= 0:
        raise ValueError("max_velocity must be positive")
    spacing_y = spacing_x if spacing_y is None else spacing_y
    f0 = np.asarray(frame_t, dtype=float)
    f1 = np.asarray(frame_t1, dtype=float)
    H, W = f0.shape
    half = patch_size // 2
    ry = search_radius(max_velocity, frame_interval, spacing_y)
    rx = search_radius(max_velocity, frame_interval, spacing_x)
    pts = np.asarray(speckles, dtype=int).reshape(-1, 2)
    disp = np.full((len(pts), 2), np.nan)
    score = np.full(len(pts), np.nan)
    coeffs = ndimage.spline_filter(f1, order=3) if subpixel == "iterative" and len(pts) else None
    for i, (r, c) in enumerate(pts):
        if r - half < 0 or c - half < 0 or r + half >= H or c + half >= W:
            continue
        template = f0[r - half:r + half + 1, c - half:c + half + 1]
        if np.ptp(template) == 0:
            continue
        r0, r1 = max(r - half - ry, 0), min(r + half + ry, H - 1)
        c0, c1 = max(c - half - rx, 0), min(c + half + rx, W - 1)
        surface = ncc_surface(template, f1[r0:r1 + 1, c0:c1 + 1])
        k = int(np.argmax(surface))
        ky, kx = divmod(k, surface.shape[1])
        dy = float(r0 + ky + half - r)
        dx = float(c0 + kx + half - c)
        # an exact integer match needs no refinement
        if subpixel != "none" and surface[ky, kx] < 1.0 - 1e-12:
            d_int = np.array([dy, dx])
            if 0 < ky < surface.shape[0] - 1:
                dy += _parabolic(surface[ky - 1, kx], surface[ky, kx], surface[ky + 1, kx])
            if 0 < kx < surface.shape[1] - 1:
                dx += _parabolic(surface[ky, kx - 1], surface[ky, kx], surface[ky, kx + 1])
            if subpixel == "iterative":
                refined = _refine_translation(coeffs, template, r, c, d_int)
                if refined is not None:
                    dy, dx = float(refined[0]), float(refined[1])
        disp[i] = (dy, dx)
        score[i] = surface[ky, kx]
    return SpeckleTracks(positions=pts, displacement=disp, score=score, threshold=threshold)


@dataclass(frozen=True)
class ThresholdDecision:
    threshold: float
    retained: np.ndarray  # boolean mask over tracks
    quality_count: int  # particles passing the base threshold
    skipped: bool


def adaptive_threshold(scores: np.ndarray, min_particles: int = 10, floor: float = 0.5,
                       start: float = BASE_THRESHOLD, step: float = 0.05) -> ThresholdDecision:
    """Lower the acceptance threshold until enough particles survive.

    Steps down from ``start`` by ``step`` and stops at the first level
    retaining ``min_particles`` or at ``floor``.  The pair is skipped when
    fewer than four particles survive even at the floor.
    """
    if min_particles < 4:
        raise ValueError("min_particles must be >= 4")
    if not 0 < floor <= start:
        raise ValueError(f"floor must be in (0, {start}]")
    s = np.nan_to_num(np.asarray(scores, dtype=float), nan=-2.0)
    quality = int(np.count_nonzero(s >= start))
    level = start
    k = 0
    while True:
        retained = s >= level - 1e-12
        if np.count_nonzero(retained) >= min_particles:
            break
        nxt = round(start - (k + 1) * step, 10)
        if nxt < floor - 1e-12:
            break
        k += 1
        level = nxt
    skipped = np.count_nonzero(retained) < 4
    return ThresholdDecision(threshold=level, retained=retained, quality_count=quality, skipped=bool(skipped))


@dataclass(frozen=True)
class StrainProfile:
    coefficients: np.ndarray  # c0..c3 of u(s) in cm
    stderr: np.ndarray
    positions: np.ndarray
    derivative: np.ndarray  # strain increment at each position
    n_points: int
    residual_rms: float


def incremental_strain_profile(axial_position, axial_displacement, positions=None,
                               reference_length: float = 1.0) -> StrainProfile:
    """Least-squares cubic of displacement versus axial fraction.

    Returns the derivative at ``positions`` divided by ``reference_length``,
    i.e. the strain increment over the frame interval.
    """
    s = np.asarray(axial_position, dtype=float)
    u = np.asarray(axial_displacement, dtype=float)
    if s.shape != u.shape or s.ndim != 1:
        raise StrainError("positions and displacements must be matching 1-D arrays")
    positions = np.linspace(0.05, 0.95, 28) if positions is None else np.asarray(positions, dtype=float)
    design = np.vander(s, 4, increasing=True)
    if len(np.unique(s)) < 4 or np.linalg.matrix_rank(design) < 4:
        raise StrainError("cubic fit needs at least 4 distinct axial positions")
    coef, *_ = np.linalg.lstsq(design, u, rcond=None)
    resid = u - design @ coef
    dof = len(s) - 4
    if dof > 0:
        sigma2 = float(resid @ resid) / dof
        cov = sigma2 * np.linalg.inv(design.T @ design)
        stderr = np.sqrt(np.clip(np.diag(cov), 0, None))
    else:
        stderr = np.full(4, np.nan)
    deriv = (coef[1] + 2 * coef[2] * positions + 3 * coef[3] * positions**2) / reference_length
    return StrainProfile(coefficients=coef, stderr=stderr, positions=positions, derivative=deriv,
                         n_points=len(s), residual_rms=float(np.sqrt(np.mean(resid**2))))


@dataclass
class StrainTrace:
    side: str
    positions: np.ndarray
    incremental: np.ndarray  # (n_pairs, P), after smoothing
    cumulative: np.ndarray  # (n_frames, P), row 0 is zero
    particle_counts: list[int] = field(default_factory=list)
    skipped_pairs: list[int] = field(default_factory=list)

    @property
    def quality(self) -> float:
        return median(self.particle_counts) if self.particle_counts else 0.0


def accumulate_strain(increments, window: int = 3) -> np.ndarray:
    """Median-smooth each position's increment series in time, then sum.

    Returns cumulative strain of shape (n_pairs + 1, P) with a zero first row.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 1:
        inc = inc[:, None]
    if inc.shape[0] < 1:
        raise StrainError("need at least one frame pair")
    smooth = smooth_increments(inc, window)
    return np.vstack([np.zeros((1, inc.shape[1])), np.cumsum(smooth, axis=0)])


def smooth_increments(inc: np.ndarray, window: int = 3) -> np.ndarray:
    if window <= 1 or inc.shape[0] < 2:
        return inc.copy()
    return ndimage.median_filter(inc, size=(window, 1), mode="nearest")


def _pooled(traces) -> list[StrainTrace]:
    traces = [t for t in traces if t is not None]
    if not traces:
        raise StrainError("no valid strain trace")
    return traces


def global_longitudinal_strain(traces) -> float:
    """Magnitude (percent) of the most negative position-averaged strain over frames."""
    traces = _pooled(traces)
    pooled = np.hstack([t.cumulative for t in traces])
    per_frame = pooled.mean(axis=1)
    return float(-min(per_frame.min(), 0.0) * 100.0)


def average_longitudinal_strain(traces) -> float:
    """Median over axial positions of each position's most negative strain (percent magnitude).

    With two hemi-ventricles the traces are first averaged position by position.
    """
    traces = _pooled(traces)
    stack = np.mean([t.cumulative for t in traces], axis=0)
    if not 25 <= stack.shape[1] <= 30:
        raise StrainError(f"average strain expects 25-30 positions, got {stack.shape[1]}")
    per_position = stack.min(axis=0)
    return float(abs(min(median(per_position), 0.0)) * 100.0)


@dataclass
class StrainResult:
    gls: float | None
    average_ls: float | None
    quality: float
    traces: list[StrainTrace]
    flags: list[str] = field(default_factory=list)
    reference_length: float | None = None

    def per_frame(self) -> list[float]:
        """Position-averaged cumulative strain (percent, signed) for each frame."""
        if not self.traces:
            return []
        pooled = np.hstack([t.cumulative for t in self.traces])
        return [float(x) for x in pooled.mean(axis=1) * 100.0]

    def to_dict(self) -> dict:
        return {
            "gls": self.gls,
            "average_ls": self.average_ls,
            "quality": self.quality,
            "per_frame": self.per_frame(),
            "flags": list(self.flags),
        }


def _fill_skipped(inc: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Linearly interpolate increments of skipped pairs from valid neighbours."""
    if valid.all():
        return inc
    if not valid.any():
        return np.zeros_like(inc)
    idx = np.arange(inc.shape[0])
    out = inc.copy()
    for j in range(inc.shape[1]):
        out[~valid, j] = np.interp(idx[~valid], idx[valid], inc[valid, j])
    return out


def video_strain(video, segmentations, config: StrainConfig | None = None) -> StrainResult:
    """Speckle-tracking strain for one video given its per-frame LV masks."""
    cfg = config or StrainConfig()
    meta = video.metadata
    sx, sy = meta.pixel_spacing_x, meta.pixel_spacing_y
    frames = np.asarray(video.frames, dtype=float)
    n_pairs = video.n_frames - 1
    positions = cfg.positions
    sides = ("medial", "lateral")
    inc = {s: np.zeros((n_pairs, len(positions))) for s in sides}
    valid = {s: np.zeros(n_pairs, dtype=bool) for s in sides}
    counts = {s: [] for s in sides}
    quality_counts: list[int] = []
    flags: list[str] = []
    ref_length = None

    for t in range(n_pairs):
        try:
            rois = split_hemiventricle(segmentations[t], sx, sy, cfg.band_width, cfg.inner_band, cfg.min_lv_pixels)
        except StrainError as exc:
            flags.append(f"pair {t}: {exc}")
            continue
        axis = rois[0].axis
        if ref_length is None:
            ref_length = axis.length
        pair_quality = 0
        for roi in rois:
            pts = detect_speckles(frames[t], roi.mask, cfg.diameter, cfg.min_separation)
            if len(pts):
                xy = np.column_stack([pts[:, 1] * sx, pts[:, 0] * sy])
                s_all = axis.axial_fraction(xy)
                pts = pts[(s_all >= 0) & (s_all <= 1)]
            tracks = track_speckles(frames[t], frames[t + 1], pts, cfg.patch_size, cfg.max_velocity,
                                    meta.frame_interval, sx, sy, cfg.threshold, cfg.subpixel)
            decision = adaptive_threshold(tracks.score, cfg.min_particles, cfg.threshold_floor,
                                          cfg.threshold, cfg.threshold_step)
            pair_quality += decision.quality_count
            counts[roi.side].append(decision.quality_count)
            if decision.skipped:
                flags.append(f"pair {t} {roi.side}: too few particles even at threshold {decision.threshold:.2f}")
                continue
            keep = decision.retained & tracks.tracked
            p = tracks.positions[keep]
            d = tracks.displacement[keep]
            xy = np.column_stack([p[:, 1] * sx, p[:, 0] * sy])
            s = axis.axial_fraction(xy)
            u = np.column_stack([d[:, 1] * sx, d[:, 0] * sy]) @ axis.direction
            try:
                prof = incremental_strain_profile(s, u, positions, ref_length)
            except StrainError as exc:
                flags.append(f"pair {t} {roi.side}: {exc}")
                continue
            inc[roi.side][t] = prof.derivative
            valid[roi.side][t] = True
        quality_counts.append(pair_quality)

    traces = []
    for side in sides:
        if not valid[side].any():
            flags.append(f"{side}: no valid frame pairs")
            continue
        filled = _fill_skipped(inc[side], valid[side])
        smooth = smooth_increments(filled, cfg.smoothing_window)
        cumulative = np.vstack([np.zeros((1, len(positions))), np.cumsum(smooth, axis=0)])
        traces.append(StrainTrace(side=side, positions=positions, incremental=smooth, cumulative=cumulative,
                                  particle_counts=counts[side],
                                  skipped_pairs=[int(i) for i in np.nonzero(~valid[side])[0]]))

    quality = median(quality_counts) if quality_counts else 0.0
    gls = average = None
    if traces and quality >= cfg.quality_floor:
        gls = global_longitudinal_strain(traces)
        average = average_longitudinal_strain(traces)
    elif traces:
        flags.append(f"low particle quality ({quality:g} < {cfg.quality_floor:g}); strain withheld")
    return StrainResult(gls=gls, average_ls=average, quality=float(quality), traces=traces, flags=flags,
                        reference_length=ref_length)
