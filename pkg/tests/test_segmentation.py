import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echoquant.geometry import long_axis_length, mask_area, principal_axis
from echoquant.phantom import PhantomSpec, generate_phantom
from echoquant.segmentation import (
    FrameSegmentation,
    PhantomOracleBackend,
    SegmentationError,
    StructureLabel,
    compute_iou,
    mean_iou_by_structure,
    read_label_png,
    segment_video,
    write_label_png,
)
from echoquant.views import ViewLabel

from .conftest import make_video


def test_oracle_backend_passthrough(phantom_a4c):
    video, labels, _ = phantom_a4c
    segs = segment_video(PhantomOracleBackend(), video, "A4c")
    assert len(segs) == video.n_frames
    assert all(np.array_equal(s.label_map, m) for s, m in zip(segs, labels))


def test_fifty_frame_video_gives_fifty_masks():
    video, _, _ = generate_phantom(PhantomSpec(frames=50, seed=3))
    assert len(segment_video(PhantomOracleBackend(), video, ViewLabel.A4C)) == 50


def test_unsupported_view(phantom_a4c):
    with pytest.raises(SegmentationError):
        segment_video(PhantomOracleBackend(), phantom_a4c[0], "IVC")


def test_oracle_without_masks():
    video = make_video(np.zeros((3, 8, 8), np.uint8))
    with pytest.raises(SegmentationError):
        segment_video(PhantomOracleBackend(), video, "A4c")


def test_stray_label_rejected():
    lm = np.zeros((6, 6), np.uint8)
    lm[1, 1] = StructureLabel.AORTIC_ROOT  # PLAX-only label
    with pytest.raises(SegmentationError):
        FrameSegmentation(lm, ViewLabel.A4C)


def test_backend_wrong_count():
    class Short:
        def segment(self, video, view):
            return [np.zeros(video.shape, np.uint8)]

    with pytest.raises(SegmentationError):
        segment_video(Short(), make_video(np.zeros((3, 8, 8), np.uint8)), "A4c")


def _iou_pixel_loop(a, b, label):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        pa, pb = x == label, y == label
        inter += pa and pb
        union += pa or pb
    return 1.0 if union == 0 else inter / union


def test_iou_examples():
    lab = StructureLabel.LV_BLOOD
    a = np.zeros((40, 40), np.uint8)
    a[0:10, 0:10] = lab
    assert compute_iou(a, a, lab) == 1.0
    b = np.zeros_like(a)
    b[20:30, 20:30] = lab
    assert compute_iou(a, b, lab) == 0.0
    c = np.zeros_like(a)
    c[5:15, 0:10] = lab
    assert compute_iou(a, c, lab) == pytest.approx(50 / 150)
    assert compute_iou(a, c, lab) == pytest.approx(_iou_pixel_loop(a, c, lab))


@given(arrays(np.uint8, (9, 11), elements=st.integers(0, 3)), arrays(np.uint8, (9, 11), elements=st.integers(0, 3)),
       st.sampled_from([StructureLabel.LA_BLOOD, StructureLabel.LV_BLOOD, StructureLabel.LV_MUSCLE]))
def test_iou_symmetric_bounded_and_matches_loop(a, b, label):
    v = compute_iou(a, b, label)
    assert v == compute_iou(b, a, label)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(_iou_pixel_loop(a, b, label))


def test_mean_iou_identity(phantom_a4c):
    segs = segment_video(PhantomOracleBackend(), phantom_a4c[0], "A4c")[:3]
    scores = mean_iou_by_structure(segs, segs)
    assert set(scores) == {"LA_BLOOD", "LV_BLOOD", "LV_MUSCLE", "RA_BLOOD", "RV_BLOOD", "OUTER_BOUNDARY"}
    assert all(v == 1.0 for v in scores.values())


def test_label_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    lm = rng.integers(0, 10, (17, 23)).astype(np.uint8)
    write_label_png(lm, tmp_path / "x.png")
    assert np.array_equal(read_label_png(tmp_path / "x.png"), lm)


def test_mask_area_and_axis_of_rectangle():
    m = np.zeros((50, 30), bool)
    m[10:40, 12:18] = True
    assert mask_area(m, 0.1, 0.2) == pytest.approx(180 * 0.02)
    # vertical rectangle: 30 rows of 0.2 cm
    assert long_axis_length(m, 0.1, 0.2) == pytest.approx(6.0)
    axis = principal_axis(m, 0.1, 0.2)
    assert axis.direction == pytest.approx([0.0, 1.0])


def test_axis_length_degenerate_masks():
    m = np.zeros((5, 5), bool)
    assert long_axis_length(m, 0.1, 0.1) == 0.0
    m[2, 2] = True
    assert long_axis_length(m, 0.1, 0.1) == pytest.approx(0.1)


def test_phantom_lv_length_close_to_analytic(phantom_a4c):
    video, labels, truth = phantom_a4c
    L = long_axis_length(labels[0] == StructureLabel.LV_BLOOD, 0.1, 0.1)
    assert L == pytest.approx(truth.lv_length[0], abs=0.1)
