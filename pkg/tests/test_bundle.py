import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echoquant.bundle import (
    BundleError,
    StaticPixelMask,
    StudyBundle,
    apply_static_mask,
    compute_static_mask,
    load_bundle,
    sample_frame_indices,
    write_bundle,
)

from .conftest import make_metadata, make_video


def _ring(shape, width=2):
    m = np.zeros(shape, dtype=bool)
    m[:width, :] = m[-width:, :] = True
    m[:, :width] = m[:, -width:] = True
    return m


def _ring_video(n=20, shape=(24, 30), seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n, *shape), dtype=np.uint8)
    frames[:, _ring(shape)] = 77
    return make_video(frames)


def _manifest(tmp_path, **entry_overrides):
    entry = {"file": "a.raw", "frames": 50, "rows": 100, "cols": 100, "frame_interval_s": 0.02,
             "heart_rate_bpm": 70, "px_cm_x": 0.05, "px_cm_y": 0.05, "view": "A4c"}
    entry.update(entry_overrides)
    (tmp_path / "manifest.json").write_text(json.dumps({"study_id": "x", "bsa_m2": 1.8, "videos": [entry]}))


def test_two_video_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    videos = [make_video(rng.integers(0, 256, (5, 12, 10), dtype=np.uint8), view=v, name=f"{v}.raw")
              for v in ("A4c", "PLAX")]
    bundle = StudyBundle("st1", videos, manual_reference={"lvef": 55.0}, body_surface_area=1.9,
                         patient_id="p1")
    root = write_bundle(bundle, tmp_path / "b")
    loaded = load_bundle(root)
    assert len(loaded.videos) == 2
    assert loaded.study_id == "st1" and loaded.patient_id == "p1"
    assert loaded.manual_reference == {"lvef": 55.0}
    for a, b in zip(videos, loaded.videos):
        assert np.array_equal(a.frames, b.frames)
        assert a.view_label == b.view_label
        assert b.metadata.body_surface_area == 1.9


def test_truncated_binary_is_rejected(tmp_path):
    _manifest(tmp_path)
    (tmp_path / "a.raw").write_bytes(b"\0" * 499_999)
    with pytest.raises(BundleError, match="500000"):
        load_bundle(tmp_path)


def test_zero_heart_rate_is_rejected(tmp_path):
    _manifest(tmp_path, heart_rate_bpm=0)
    (tmp_path / "a.raw").write_bytes(b"\0" * 500_000)
    with pytest.raises(BundleError, match="heart_rate"):
        load_bundle(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(BundleError):
        load_bundle(tmp_path)


def test_metadata_invariants():
    with pytest.raises(BundleError):
        make_metadata(spacing=0.0)
    with pytest.raises(BundleError):
        make_metadata(bsa=-1.0)
    assert make_metadata(heart_rate=60, frame_interval=0.05).cycle_frames == pytest.approx(20.0)


def test_sample_indices_span_video():
    idx = sample_frame_indices(50, 10)
    assert idx[0] == 0 and idx[-1] == 49 and len(idx) == 10


def test_constant_ring_is_exactly_the_mask():
    video = _ring_video()
    mask = compute_static_mask(video)
    assert np.array_equal(mask.mask, _ring(video.shape))


def test_pixel_constant_in_nine_of_ten_pairs_is_masked():
    rng = np.random.default_rng(3)
    frames = rng.integers(0, 256, size=(11, 8, 8), dtype=np.uint8)
    frames[:, 2, 3] = 40
    frames[7:, 2, 3] = 41  # exactly one of ten sampled pairs differs
    video = make_video(frames)
    mask = compute_static_mask(video, sample_count=11, static_fraction=0.8)
    # brute force: count equal consecutive sampled pairs per pixel
    idx = sample_frame_indices(11, 11)
    equal = sum(int(frames[idx[k], 2, 3] == frames[idx[k + 1], 2, 3]) for k in range(len(idx) - 1))
    assert equal == 9
    assert mask.mask[2, 3]
    assert not compute_static_mask(video, sample_count=11, static_fraction=1.0).mask[2, 3]


def test_noise_video_has_empty_mask():
    rng = np.random.default_rng(4)
    frames = rng.integers(0, 256, size=(30, 40, 40), dtype=np.uint8)
    assert not compute_static_mask(make_video(frames)).mask.any()


def test_static_mask_argument_checks():
    video = _ring_video(n=5)
    with pytest.raises(ValueError):
        compute_static_mask(video, sample_count=10)
    with pytest.raises(ValueError):
        compute_static_mask(video, sample_count=3, static_fraction=0.0)


def test_empty_mask_is_identity():
    video = _ring_video()
    out = apply_static_mask(video, StaticPixelMask(np.zeros(video.shape, dtype=bool)))
    assert np.array_equal(out.frames, video.frames)


def test_full_mask_zeroes_video():
    video = _ring_video()
    out = apply_static_mask(video, StaticPixelMask(np.ones(video.shape, dtype=bool)))
    assert not out.frames.any()


def test_ring_mask_zeroes_only_ring_pixel_loop():
    video = _ring_video()
    ring = _ring(video.shape)
    out = apply_static_mask(video, StaticPixelMask(ring))
    T, H, W = video.frames.shape
    for t in range(T):
        for r in range(H):
            for c in range(W):
                expect = 0 if ring[r, c] else video.frames[t, r, c]
                assert out.frames[t, r, c] == expect


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        apply_static_mask(_ring_video(), StaticPixelMask(np.zeros((3, 3), dtype=bool)))


@given(arrays(np.uint8, (12, 6, 7), elements=st.integers(0, 3)), st.sampled_from([0.5, 0.8, 1.0]))
def test_masking_never_unmasks(frames, fraction):
    video = make_video(frames)
    mask = compute_static_mask(video, 10, fraction)
    again = compute_static_mask(apply_static_mask(video, mask), 10, fraction)
    assert np.all(again.mask[mask.mask])
