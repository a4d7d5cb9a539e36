import cv2
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from echoquant.strain import (
    StrainConfig,
    StrainError,
    StrainTrace,
    accumulate_strain,
    adaptive_threshold,
    average_longitudinal_strain,
    detect_speckles,
    global_longitudinal_strain,
    incremental_strain_profile,
    ncc_surface,
    search_radius,
    split_hemiventricle,
    track_speckles,
    video_strain,
)


def _ellipse_mask(shape=(120, 80), cy=60, cx=40, a=35, b=18):
    yy, xx = np.indices(shape)
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1


def _blob(shape, centres, sigma=1.0, amp=200.0):
    yy, xx = np.indices(shape)
    img = np.zeros(shape)
    for r, c in centres:
        img += amp * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sigma**2))
    return img


# --- hemi-ventricle split --------------------------------------------------

def test_split_halves_balanced_within_axis_row():
    lv = _ellipse_mask()
    med, lat = split_hemiventricle(lv, 0.1, 0.1)
    assert not (med.mask & lat.mask).any()
    band = med.mask | lat.mask
    axis_pixels = int(np.count_nonzero(band[:, 40]))
    assert abs(int(med.mask.sum()) - int(lat.mask.sum())) <= axis_pixels
    assert med.axis.direction == pytest.approx([0.0, 1.0])


def test_split_of_symmetric_mask_mirrors():
    lv = _ellipse_mask()
    med, lat = split_hemiventricle(lv, 0.1, 0.1)
    mirrored = lat.mask[:, ::-1]  # reflection about column 39.5 of an 80-wide grid
    shifted = np.zeros_like(mirrored)
    shifted[:, 1:] = mirrored[:, :-1]  # now reflected about column 40, the axis
    off_axis = med.mask.copy()
    off_axis[:, 40] = False
    assert np.array_equal(shifted, off_axis)


def test_band_geometry():
    lv = _ellipse_mask()
    med, lat = split_hemiventricle(lv, 0.1, 0.1, band_width=8, inner_band=2)
    band = med.mask | lat.mask
    assert band[60, 40 + 18 + 8] and not band[60, 40 + 18 + 10]
    assert band[60, 40 + 17] and not band[60, 40]


def test_split_empty_mask():
    with pytest.raises(StrainError):
        split_hemiventricle(np.zeros((50, 50), bool))


# --- speckle detection ----------------------------------------------------

def test_single_blob():
    pts = detect_speckles(_blob((60, 60), [(30, 41)]))
    assert len(pts) == 1
    assert np.abs(pts[0] - [30, 41]).max() <= 1


def test_two_blobs_suppressed_by_separation():
    img = _blob((60, 60), [(30, 28), (30, 32)], sigma=0.8)
    assert len(detect_speckles(img, diameter=3, min_separation=6)) == 1
    assert len(detect_speckles(img, diameter=3, min_separation=3)) == 2


def test_blank_frame():
    assert detect_speckles(np.zeros((40, 40))).shape == (0, 2)
    assert detect_speckles(np.full((40, 40), 9.0)).shape == (0, 2)


def test_detection_respects_roi():
    img = _blob((60, 60), [(15, 15), (45, 45)])
    roi = np.zeros((60, 60), bool)
    roi[30:, 30:] = True
    pts = detect_speckles(img, roi)
    assert len(pts) == 1 and np.abs(pts[0] - [45, 45]).max() <= 1


# --- NCC and tracking -----------------------------------------------------

def test_ncc_matches_opencv():
    rng = np.random.default_rng(0)
    for _ in range(5):
        search = rng.uniform(0, 255, (31, 27))
        template = rng.uniform(0, 255, (17, 17))
        ref = cv2.matchTemplate(search.astype(np.float32), template.astype(np.float32), cv2.TM_CCOEFF_NORMED)
        assert ncc_surface(template, search) == pytest.approx(ref.astype(float), abs=1e-4)


@given(st.floats(0.1, 10), st.floats(-100, 100), st.integers(0, 2**16))
def test_ncc_invariant_to_affine_intensity(gain, offset, seed):
    rng = np.random.default_rng(seed)
    search = rng.uniform(0, 255, (21, 21))
    template = search[3:14, 5:16].copy()
    a = ncc_surface(template, search)
    b = ncc_surface(template, gain * search + offset)
    assert a == pytest.approx(b, abs=1e-9)
    assert a[3, 5] == pytest.approx(1.0)


def test_ncc_flat_window_scores_zero():
    s = ncc_surface(np.arange(9.0).reshape(3, 3), np.zeros((5, 5)))
    assert np.all(s == 0.0)


def test_search_radius():
    assert search_radius(12.0, 1 / 30, 0.1) == 4
    assert search_radius(3.0, 0.1, 0.1) == 3


def test_exact_shift_recovered():
    rng = np.random.default_rng(1)
    f0 = ndimage_texture(rng)
    f1 = np.roll(f0, (3, 2), axis=(0, 1))
    pts = np.array([[30, 30], [40, 45], [50, 35], [25, 50]])
    for method in ("none", "parabolic", "iterative"):
        tr = track_speckles(f0, f1, pts, subpixel=method)
        assert np.array_equal(tr.displacement, np.tile([3.0, 2.0], (4, 1)))
        assert tr.score == pytest.approx(1.0)
        assert tr.accepted.all()


def ndimage_texture(rng, shape=(80, 80)):
    from scipy import ndimage

    return ndimage.gaussian_filter(rng.uniform(0, 255, shape), 1.2)


def test_subpixel_shift_refined():
    from scipy import ndimage

    rng = np.random.default_rng(2)
    f0 = ndimage_texture(rng)
    f1 = ndimage.shift(f0, (1.3, -0.6), order=3, mode="nearest")
    pts = np.array([[30, 30], [40, 45], [45, 35]])
    tr = track_speckles(f0, f1, pts, subpixel="iterative")
    assert tr.displacement == pytest.approx(np.tile([1.3, -0.6], (3, 1)), abs=0.05)
    coarse = track_speckles(f0, f1, pts, subpixel="none")
    assert np.array_equal(coarse.displacement, np.tile([1.0, -1.0], (3, 1)))


def test_uncorrelated_target_rejected():
    rejected = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        f0 = rng.uniform(0, 255, (60, 60))
        f1 = rng.uniform(0, 255, (60, 60))
        tr = track_speckles(f0, f1, np.array([[30, 30]]), threshold=0.85)
        rejected += int(not tr.accepted[0])
    assert rejected == 20


def test_shift_beyond_search_square_never_returned():
    rng = np.random.default_rng(3)
    f0 = ndimage_texture(rng, (100, 100))
    f1 = np.roll(f0, (8, 0), axis=(0, 1))  # radius is 4 px
    tr = track_speckles(f0, f1, np.array([[50, 50], [40, 60]]), subpixel="none")
    assert np.all(np.abs(tr.displacement) <= 4)
    assert not np.any(np.all(tr.displacement == [8.0, 0.0], axis=1))


def test_border_speckles_skipped():
    f = np.random.default_rng(0).uniform(0, 255, (40, 40))
    tr = track_speckles(f, f, np.array([[3, 20], [20, 20]]))
    assert list(tr.tracked) == [False, True]


# --- adaptive threshold ---------------------------------------------------

def test_threshold_stays_when_enough_pass():
    d = adaptive_threshold(np.full(20, 0.9))
    assert d.threshold == 0.85 and d.retained.sum() == 20 and not d.skipped and d.quality_count == 20


def test_threshold_steps_down():
    scores = np.array([0.9, 0.92] + [0.77] * 10 + [0.3] * 5)
    d = adaptive_threshold(scores, min_particles=10)
    assert d.threshold == pytest.approx(0.75)
    assert d.retained.sum() == 12 and d.quality_count == 2


def test_threshold_floor_skip():
    d = adaptive_threshold(np.array([0.5, 0.1, np.nan]))
    assert d.threshold == pytest.approx(0.5) and d.skipped


# --- profile fit ----------------------------------------------------------

def test_linear_shortening_exact():
    L = 7.2
    s = np.linspace(0, 1, 40)
    prof = incremental_strain_profile(s, -0.01 * s * L, reference_length=L)
    assert prof.derivative == pytest.approx(np.full(28, -0.01), abs=1e-12)
    assert prof.residual_rms < 1e-12


def test_uniform_displacement_zero_strain():
    s = np.random.default_rng(0).uniform(0, 1, 30)
    prof = incremental_strain_profile(s, np.full(30, 0.37))
    assert prof.derivative == pytest.approx(np.zeros(28), abs=1e-10)


def test_noisy_cubic_within_three_sigma():
    truth = np.array([0.01, -0.03, 0.02, -0.01])
    hits = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        s = rng.uniform(0, 1, 60)
        u = np.polyval(truth[::-1], s) + rng.normal(0, 0.002, 60)
        prof = incremental_strain_profile(s, u)
        hits += bool(np.all(np.abs(prof.coefficients - truth) <= 3 * prof.stderr))
    assert hits >= 36


def test_profile_needs_four_points():
    with pytest.raises(StrainError):
        incremental_strain_profile([0.1, 0.2, 0.2, 0.3], [0, 0, 0, 0])


# --- accumulation and summaries -------------------------------------------

def test_constant_increment_accumulates():
    cum = accumulate_strain(np.full((30, 28), -0.005))
    assert cum.shape == (31, 28)
    assert cum[-1] == pytest.approx(np.full(28, -0.15))
    assert np.all(cum[0] == 0)


def test_zero_increments():
    assert not accumulate_strain(np.zeros((10, 28))).any()


def test_single_outlier_removed():
    inc = np.full((12, 1), -0.004)
    inc[6] = 0.08
    cum = accumulate_strain(inc, window=3)
    assert cum[-1, 0] == pytest.approx(-0.048)


def _trace(cumulative):
    cum = np.asarray(cumulative, dtype=float)
    return StrainTrace("medial", np.linspace(0.05, 0.95, cum.shape[1]), np.diff(cum, axis=0), cum)


def test_uniform_field_average_equals_global():
    cum = np.outer(np.concatenate([np.linspace(0, -0.18, 10), np.linspace(-0.18, 0, 10)]), np.ones(28))
    tr = [_trace(cum), _trace(cum)]
    assert average_longitudinal_strain(tr) == pytest.approx(global_longitudinal_strain(tr))
    assert global_longitudinal_strain(tr) == pytest.approx(18.0)


def test_half_and_half_positions_median():
    peak = np.array([-0.10] * 14 + [-0.20] * 14)
    cum = np.vstack([np.zeros(28), peak, peak / 2])
    assert average_longitudinal_strain([_trace(cum)]) == pytest.approx(15.0)


def test_static_summaries_zero():
    cum = np.zeros((5, 28))
    assert global_longitudinal_strain([_trace(cum)]) == 0.0
    assert average_longitudinal_strain([_trace(cum)]) == 0.0


def test_average_requires_position_count():
    with pytest.raises(StrainError):
        average_longitudinal_strain([_trace(np.zeros((3, 10)))])


def test_config_validation():
    with pytest.raises(ValueError):
        StrainConfig(patch_size=16)
    with pytest.raises(ValueError):
        StrainConfig(threshold_floor=0.9)
    with pytest.raises(ValueError):
        StrainConfig(subpixel="cubic")
    assert len(StrainConfig().positions) == 28


# --- full video ------------------------------------------------------------

def test_phantom_gls(phantom_a4c):
    video, labels, truth = phantom_a4c
    res = video_strain(video, labels)
    assert res.gls == pytest.approx(abs(truth.gls), abs=1.0)
    assert res.average_ls == pytest.approx(abs(truth.gls), abs=1.0)
    assert res.quality >= 8
    pf = res.per_frame()
    assert len(pf) == video.n_frames and pf[0] == 0.0
    assert min(pf) == pytest.approx(-res.gls)


def test_static_video_zero_strain(static_phantom):
    video, labels, _ = static_phantom
    res = video_strain(video, labels)
    assert res.gls == 0.0 and res.average_ls == 0.0


def test_low_quality_withholds_strain(static_phantom):
    video, labels, _ = static_phantom
    res = video_strain(video, labels, StrainConfig(quality_floor=1e6))
    assert res.gls is None and any("withheld" in f for f in res.flags)
