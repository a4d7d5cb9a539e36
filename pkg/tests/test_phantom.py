import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from echoquant.bundle import load_bundle, write_bundle
from echoquant.phantom import PhantomError, PhantomSpec, contraction_phase, generate_phantom, phantom_bundle, spec_for_ef
from echoquant.segmentation import StructureLabel


def test_zero_contraction_is_static(static_phantom):
    video, labels, truth = static_phantom
    assert truth.ef == 0.0 and truth.gls == 0.0
    assert all(np.array_equal(video.frames[0], f) for f in video.frames)
    assert all(np.array_equal(labels[0], m) for m in labels)


def test_prescribed_longitudinal_strain():
    spec = PhantomSpec(longitudinal_strain=-0.15)
    assert spec.lv_long_es == pytest.approx(0.85 * spec.lv_long_ed)
    _, _, truth = generate_phantom(PhantomSpec(frames=4, longitudinal_strain=-0.15))
    assert truth.gls == pytest.approx(-15.0)


def test_rasterized_ed_ellipse_area(phantom_a4c):
    video, labels, truth = phantom_a4c
    spec = PhantomSpec()
    a_px, b_px = spec.lv_long_ed / spec.pixel_spacing, spec.lv_short_ed / spec.pixel_spacing
    assert min(a_px, b_px) >= 20
    count = np.count_nonzero(labels[0] == StructureLabel.LV_BLOOD)
    assert count == pytest.approx(np.pi * a_px * b_px, rel=0.02)
    assert truth.lv_area[0] == pytest.approx(np.pi * spec.lv_long_ed * spec.lv_short_ed)


def test_closed_form_volumes_match_ellipsoid():
    _, _, truth = generate_phantom(PhantomSpec(frames=4))
    spec = PhantomSpec()
    # area-length on an ellipse reproduces the prolate ellipsoid 4/3 pi a b^2
    assert truth.edv == pytest.approx(4 / 3 * np.pi * spec.lv_long_ed * spec.lv_short_ed**2)
    assert truth.esv == pytest.approx(4 / 3 * np.pi * spec.lv_long_es * spec.lv_short_es**2)


@pytest.mark.parametrize("ef", [25.0, 40.0, 62.5, 75.0])
def test_spec_for_ef_hits_target(ef):
    _, _, truth = generate_phantom(spec_for_ef(ef, frames=3))
    assert truth.ef == pytest.approx(ef, abs=1e-9)


def test_spec_for_ef_unreachable():
    with pytest.raises(PhantomError):
        spec_for_ef(5.0, longitudinal_strain=-0.2)


def test_raised_cosine_without_dwell():
    x = np.linspace(0, 1, 101)
    assert contraction_phase(x, 0.0) == pytest.approx((1 - np.cos(2 * np.pi * x)) / 2, abs=1e-12)


def test_dwell_plateaus():
    x = np.array([0.0, 0.1, 0.149, 0.5, 0.55, 0.64])
    p = contraction_phase(x, 0.15)
    assert p[:3] == pytest.approx(0.0)
    assert p[3:] == pytest.approx(1.0)


@given(st.floats(-3, 3), st.floats(0, 0.45))
def test_phase_bounded_and_periodic(x, dwell):
    p = contraction_phase(np.array([x, x + 1.0]), dwell)
    assert 0.0 <= p[0] <= 1.0
    assert p[0] == pytest.approx(p[1], abs=1e-9)


def test_frame_zero_is_end_diastole(phantom_a4c):
    _, _, truth = phantom_a4c
    assert truth.phase[0] == 0.0
    assert truth.lv_volume[0] == pytest.approx(truth.edv)
    assert truth.lv_volume.min() == pytest.approx(truth.esv)


def test_geometry_that_does_not_fit():
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(rows=90, frames=2))


def test_invalid_specs():
    with pytest.raises(PhantomError):
        PhantomSpec(longitudinal_strain=0.1)
    with pytest.raises(PhantomError):
        PhantomSpec(view="PSAX")


def test_translation_moves_labels_rigidly():
    spec = PhantomSpec(longitudinal_strain=0.0, short_axis_contraction=0.0, translation=(0.2, 0.1), frames=21)
    _, labels, _ = generate_phantom(spec)
    lv0 = np.argwhere(labels[0] == StructureLabel.LV_BLOOD).mean(axis=0)
    lv1 = np.argwhere(labels[20] == StructureLabel.LV_BLOOD).mean(axis=0)
    assert lv1 - lv0 == pytest.approx([4.0, 2.0], abs=0.5)


def test_views_render_their_label_sets():
    for view, present, absent in (("A2c", StructureLabel.LV_MUSCLE, StructureLabel.RV_BLOOD),
                                  ("PLAX", StructureLabel.ANTERIOR_SEPTUM, StructureLabel.LV_BLOOD)):
        _, labels, _ = generate_phantom(PhantomSpec(view=view, frames=2))
        assert (labels == present).any()
        assert not (labels == absent).any()


def test_bundle_round_trip_keeps_truth(tmp_path):
    bundle, truth = phantom_bundle(PhantomSpec(frames=8, seed=4), views=("A4c", "PLAX"), study_id="ph")
    loaded = load_bundle(write_bundle(bundle, tmp_path / "ph"))
    assert loaded.study_id == "ph"
    assert [v.view_label for v in loaded.videos] == ["A4c", "PLAX"]
    assert all(np.array_equal(a.truth_masks, b.truth_masks) for a, b in zip(bundle.videos, loaded.videos))
    assert loaded.manual_reference == pytest.approx(truth.indexed())
    assert set(truth.indexed()) == {"lvedvi", "lvesvi", "lvef", "lavoli", "lvmi", "gls"}


def test_seeded_generation_is_reproducible():
    a = generate_phantom(PhantomSpec(frames=5, seed=11, noise=3.0))[0].frames
    b = generate_phantom(PhantomSpec(frames=5, seed=11, noise=3.0))[0].frames
    c = generate_phantom(PhantomSpec(frames=5, seed=12, noise=3.0))[0].frames
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
