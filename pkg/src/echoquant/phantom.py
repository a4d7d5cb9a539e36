"""Synthetic beating-heart phantom with closed-form ground truth.

The left ventricle is an ellipse whose semi-axes move between end-diastole
(ED) and end-systole (ES) with half-cosine transitions; optional dwell
plateaus hold each extreme for a fraction of the cycle.  Myocardial speckles
are bright Gaussian dots scattered over the ED wall and carried each frame
by the affine map taking the ED ellipse onto the current one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .bundle import EchoVideo, StudyBundle, StudyMetadata
from .quantify import area_length_volume, ejection_fraction, lv_mass_area_length
from .segmentation import StructureLabel as S
from .views import ViewLabel


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    rows: int = 200
    cols: int = 144
    pixel_spacing: float = 0.1  # cm / pixel, isotropic
    frames: int = 60
    heart_rate: float = 60.0
    frame_interval: float = 1.0 / 30.0
    lv_long_ed: float = 4.0  # cm, long semi-axis at ED
    lv_short_ed: float = 2.2  # cm, short semi-axis at ED
    longitudinal_strain: float = -0.15  # (a_es - a_ed) / a_ed
    short_axis_contraction: float = 0.2  # 1 - b_es / b_ed
    wall_thickness: float = 1.0
    la_long: float = 2.4  # LA semi-axes at ED; the atrium fills during systole
    la_short: float = 1.9
    la_expansion: float = 0.15
    right_heart: bool = True
    dwell_fraction: float = 0.15
    phase_offset: float = 0.0  # cycle fraction at frame 0
    speckle_density: float = 0.15  # dots per ED wall pixel
    speckle_sigma: float = 0.8  # px
    speckle_brightness: float = 220.0
    noise: float = 0.0  # std of additive Gaussian noise, intensity units
    translation: tuple[float, float] = (0.0, 0.0)  # (rows, cols) pixels per frame
    overlay: bool = True
    view: str = "A4c"
    body_surface_area: float | None = 1.9
    seed: int = 0

    def __post_init__(self):
        for name in ("pixel_spacing", "heart_rate", "frame_interval", "lv_long_ed", "lv_short_ed",
                     "wall_thickness", "la_long", "la_short"):
            if not getattr(self, name) > 0:
                raise PhantomError(f"{name} must be positive")
        if not -1 < self.longitudinal_strain <= 0:
            raise PhantomError("longitudinal_strain must lie in (-1, 0]")
        if not 0 <= self.short_axis_contraction < 1:
            raise PhantomError("short_axis_contraction must lie in [0, 1)")
        if not 0 <= self.dwell_fraction < 0.5:
            raise PhantomError("dwell_fraction must lie in [0, 0.5)")
        if self.frames < 2:
            raise PhantomError("need at least 2 frames")
        if ViewLabel.parse(self.view) not in (ViewLabel.A4C, ViewLabel.A2C, ViewLabel.PLAX):
            raise PhantomError(f"phantom cannot render view {self.view}")

    @property
    def cycle_frames(self) -> float:
        return (60.0 / self.heart_rate) / self.frame_interval

    @property
    def lv_long_es(self) -> float:
        return self.lv_long_ed * (1 + self.longitudinal_strain)

    @property
    def lv_short_es(self) -> float:
        return self.lv_short_ed * (1 - self.short_axis_contraction)


@dataclass
class AnalyticTruth:
    lv_area: np.ndarray  # cm^2 per frame
    lv_length: np.ndarray  # cm per frame
    lv_volume: np.ndarray  # mL per frame
    la_volume: np.ndarray
    edv: float
    esv: float
    ef: float  # percent
    gls: float  # percent, negative for shortening
    la_volume_max: float
    lv_mass: float  # g, at ED
    body_surface_area: float | None = None
    phase: np.ndarray = field(default=None, repr=False)

    def indexed(self) -> dict[str, float]:
        """Study-level reference values keyed like the measurement report."""
        bsa = self.body_surface_area or 1.0
        out = {
            "lvedvi": self.edv / bsa,
            "lvesvi": self.esv / bsa,
            "lvef": self.ef,
            "lavoli": self.la_volume_max / bsa,
            "lvmi": self.lv_mass / bsa,
            "gls": abs(self.gls),
        }
        return {k: float(v) for k, v in out.items()}

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in asdict(self).items() if not isinstance(v, np.ndarray) and k != "phase"}


def contraction_phase(cycle_position: np.ndarray, dwell: float) -> np.ndarray:
    """0 at end-diastole, 1 at end-systole.

    The cycle (in fractions of a beat) is ED plateau, half-cosine
    contraction, ES plateau, half-cosine relaxation.  With ``dwell=0`` this
    is the plain raised cosine ``(1 - cos 2 pi x) / 2``.
    """
    x = np.mod(np.asarray(cycle_position, dtype=float), 1.0)
    ramp = (1.0 - 2.0 * dwell) / 2.0
    out = np.zeros_like(x)
    up = (x >= dwell) & (x < dwell + ramp)
    out[up] = (1 - np.cos(np.pi * (x[up] - dwell) / ramp)) / 2
    out[(x >= dwell + ramp) & (x < 2 * dwell + ramp)] = 1.0
    down = x >= 2 * dwell + ramp
    out[down] = (1 + np.cos(np.pi * (x[down] - 2 * dwell - ramp) / ramp)) / 2
    return out


def _ellipse(yy, xx, cy, cx, a, b):
    """Pixel-centre inclusion test; ``a`` along rows, ``b`` along columns (cm)."""
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def _layout(spec: PhantomSpec):
    h = spec.pixel_spacing
    w = spec.wall_thickness
    lv_cx = spec.cols * h / 2
    if spec.right_heart:
        lv_cx = spec.cols * h - (spec.lv_short_ed + 2 * w) - 4 * h
    la_a_max = spec.la_long * (1 + spec.la_expansion)
    # centre the heart vertically (whole pixels), leaving room for the drift
    height = 2 * spec.lv_long_ed + 3 * w + 2 * la_a_max + w
    drift_y, drift_x = (spec.frames - 1) * np.asarray(spec.translation, dtype=float) * h
    slack = spec.rows * h - 8 * h - height
    lv_cy = h * 4 + spec.lv_long_ed + 2 * w + round((slack / 2 - drift_y / 2) / h) * h
    lv_cx -= max(drift_x, 0.0)
    la_cy = lv_cy + spec.lv_long_ed + w + la_a_max
    return lv_cy, lv_cx, la_cy


def _phase(spec: PhantomSpec) -> np.ndarray:
    t = np.arange(spec.frames) / spec.cycle_frames + spec.phase_offset
    # shift so that frame 0 sits in the middle of the ED plateau
    return contraction_phase(t + spec.dwell_fraction / 2, spec.dwell_fraction)


def _label_frame(spec, yy, xx, cy, cx, la_cy, a, b, la_a, la_b, view):
    w = spec.wall_thickness
    h = spec.pixel_spacing
    lv = _ellipse(yy, xx, cy, cx, a, b)
    epi = _ellipse(yy, xx, cy, cx, a + w, b + w)
    la = _ellipse(yy, xx, la_cy, cx, la_a, la_b) & ~epi
    labels = np.zeros(yy.shape, dtype=np.uint8)
    structures = [lv, epi, la]
    rv = ra = None
    if spec.right_heart and view in (ViewLabel.A4C, ViewLabel.PLAX):
        scale_a, scale_b = a / spec.lv_long_ed, b / spec.lv_short_ed
        rv_cx = cx - (b + w) - 1.2 * scale_b - 0.3
        rv = _ellipse(yy, xx, cy + 0.4, rv_cx, 0.8 * spec.lv_long_ed * scale_a, 1.2 * scale_b) & ~epi
        structures.append(rv)
        if view == ViewLabel.A4C:
            ra = _ellipse(yy, xx, la_cy, rv_cx - 0.2, 0.8 * la_a, 0.9 * la_b) & ~la & ~epi & ~rv
            structures.append(ra)
    union = np.logical_or.reduce(structures)
    dist = ndimage.distance_transform_edt(~union)
    outer = (dist * h <= w) & ~union

    if view == ViewLabel.PLAX:
        labels[outer | lv] = S.OUTER_BOUNDARY
        wall = epi & ~lv
        labels[wall & (xx < cx)] = S.ANTERIOR_SEPTUM
        labels[wall & (xx >= cx)] = S.POSTERIOR_WALL
    else:
        labels[outer] = S.OUTER_BOUNDARY
        labels[epi & ~lv] = S.LV_MUSCLE
        labels[lv] = S.LV_BLOOD
    labels[la] = S.LA_BLOOD
    if rv is not None:
        labels[rv] = S.RV_BLOOD
    if ra is not None:
        labels[ra] = S.RA_BLOOD
    return labels


def _render_speckles(shape, pos_rc, amps, sigma):
    """Sum of isotropic Gaussian dots centred at sub-pixel (row, col) positions."""
    img = np.zeros(shape, dtype=float)
    rad = int(np.ceil(4 * sigma))
    offs = np.arange(-rad, rad + 1)
    base = np.floor(pos_rc).astype(int)
    frac = pos_rc - base
    dr = offs[None, :] - frac[:, 0:1]
    dc = offs[None, :] - frac[:, 1:2]
    gr = np.exp(-(dr**2) / (2 * sigma**2))
    gc = np.exp(-(dc**2) / (2 * sigma**2))
    stamps = amps[:, None, None] * gr[:, :, None] * gc[:, None, :]
    rr = base[:, 0:1, None] + offs[None, :, None]
    cc = base[:, 1:2, None] + offs[None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    ok = (rr >= 0) & (rr < shape[0]) & (cc >= 0) & (cc < shape[1])
    np.add.at(img, (rr[ok], cc[ok]), stamps[ok])
    return img


def generate_phantom(spec: PhantomSpec) -> tuple[EchoVideo, np.ndarray, AnalyticTruth]:
    """Render the phantom; returns (video, label maps T x H x W, analytic truth)."""
    view = ViewLabel.parse(spec.view)
    h = spec.pixel_spacing
    rng = np.random.default_rng(spec.seed)
    lv_cy, lv_cx, la_cy = _layout(spec)

    phase = _phase(spec)
    a = spec.lv_long_ed + (spec.lv_long_es - spec.lv_long_ed) * phase
    b = spec.lv_short_ed + (spec.lv_short_es - spec.lv_short_ed) * phase
    la_a = spec.la_long * (1 + spec.la_expansion * phase)
    la_b = spec.la_short * (1 + spec.la_expansion * phase)
    shift = np.arange(spec.frames)[:, None] * np.asarray(spec.translation, dtype=float)[None, :] * h

    w = spec.wall_thickness
    yy, xx = np.meshgrid(np.arange(spec.rows) * h, np.arange(spec.cols) * h, indexing="ij")

    # speckles on the ED myocardial wall, in cm relative to the LV centre
    wall_area_px = np.pi * ((spec.lv_long_ed + w) * (spec.lv_short_ed + w) - spec.lv_long_ed * spec.lv_short_ed) / h**2
    n_speckles = int(round(spec.speckle_density * wall_area_px))
    pts = []
    while len(pts) < n_speckles:
        cand = rng.uniform(-1, 1, size=(4 * n_speckles + 8, 2)) * [spec.lv_long_ed + w, spec.lv_short_ed + w]
        inside_epi = (cand[:, 0] / (spec.lv_long_ed + w)) ** 2 + (cand[:, 1] / (spec.lv_short_ed + w)) ** 2 <= 1
        outside_lv = (cand[:, 0] / spec.lv_long_ed) ** 2 + (cand[:, 1] / spec.lv_short_ed) ** 2 > 1
        pts.extend(cand[inside_epi & outside_lv].tolist())
    speckles = np.asarray(pts[:n_speckles]).reshape(-1, 2)
    amps = rng.uniform(0.5, 1.0, size=len(speckles)) * spec.speckle_brightness
    noise_rng = np.random.default_rng([spec.seed, 1])

    frames = np.zeros((spec.frames, spec.rows, spec.cols), dtype=np.uint8)
    labels = np.zeros_like(frames)
    for t in range(spec.frames):
        cy, cx = lv_cy + shift[t, 0], lv_cx + shift[t, 1]
        labels[t] = _label_frame(spec, yy, xx, cy, cx, la_cy + shift[t, 0], a[t], b[t], la_a[t], la_b[t], view)
        if labels[t][[0, 1, 2, -3, -2, -1], :].any() or labels[t][:, [0, 1, 2, -3, -2, -1]].any():
            raise PhantomError(f"phantom geometry does not fit inside the image grid (frame {t})")
        moved = np.column_stack([cy + speckles[:, 0] * a[t] / spec.lv_long_ed,
                                 cx + speckles[:, 1] * b[t] / spec.lv_short_ed]) / h
        img = _render_speckles((spec.rows, spec.cols), moved, amps, spec.speckle_sigma)
        if spec.noise > 0:
            img = img + noise_rng.normal(0.0, spec.noise, size=img.shape)
        img = np.clip(np.rint(img), 0, 255)
        if spec.overlay:
            img[:2, :] = 128
            img[-2:, :] = 128
            img[:, :2] = 128
            img[:, -2:] = 128
        frames[t] = img.astype(np.uint8)

    lv_area = np.pi * a * b
    lv_len = 2 * a
    lv_vol = np.array([area_length_volume(A, L) for A, L in zip(lv_area, lv_len)])
    la_vol = np.array([area_length_volume(np.pi * p * q, 2 * p) for p, q in zip(la_a, la_b)])
    edv = area_length_volume(np.pi * spec.lv_long_ed * spec.lv_short_ed, 2 * spec.lv_long_ed)
    esv = area_length_volume(np.pi * spec.lv_long_es * spec.lv_short_es, 2 * spec.lv_long_es)
    la_max = area_length_volume(
        np.pi * spec.la_long * spec.la_short * (1 + spec.la_expansion) ** 2,
        2 * spec.la_long * (1 + spec.la_expansion),
    )
    mass = lv_mass_area_length(
        np.pi * (spec.lv_long_ed + w) * (spec.lv_short_ed + w),
        np.pi * spec.lv_long_ed * spec.lv_short_ed,
        2 * spec.lv_long_ed,
    )
    truth = AnalyticTruth(
        lv_area=lv_area,
        lv_length=lv_len,
        lv_volume=lv_vol,
        la_volume=la_vol,
        edv=edv,
        esv=esv,
        ef=ejection_fraction(edv, esv),
        gls=100.0 * (spec.lv_long_es - spec.lv_long_ed) / spec.lv_long_ed,
        la_volume_max=la_max,
        lv_mass=mass,
        body_surface_area=spec.body_surface_area,
        phase=phase,
    )
    meta = StudyMetadata(
        study_id=f"phantom-{spec.seed}",
        frame_interval=spec.frame_interval,
        heart_rate=spec.heart_rate,
        rows=spec.rows,
        cols=spec.cols,
        pixel_spacing_x=h,
        pixel_spacing_y=h,
        body_surface_area=spec.body_surface_area,
    )
    video = EchoVideo(frames=frames, metadata=meta, view_label=view.value, truth_masks=labels,
                      name=f"{view.value.lower()}_{spec.seed}")
    return video, labels, truth


def spec_for_ef(ef_percent: float, longitudinal_strain: float = -0.15, **kwargs) -> PhantomSpec:
    """Pick the short-axis contraction that gives a target analytic EF.

    With area-length volumes an ellipse of semi-axes (a, b) has V = 4/3 pi a b^2,
    so EF = 1 - (1 + strain)(1 - c)^2.
    """
    ratio = (1 - ef_percent / 100.0) / (1 + longitudinal_strain)
    if not 0 < ratio <= 1:
        raise PhantomError(f"EF {ef_percent}% unreachable with strain {longitudinal_strain}")
    return PhantomSpec(longitudinal_strain=longitudinal_strain, short_axis_contraction=1 - np.sqrt(ratio), **kwargs)


def phantom_bundle(spec: PhantomSpec, views=("A4c",), study_id: str | None = None,
                   with_reference: bool = True) -> tuple[StudyBundle, AnalyticTruth]:
    """One study of phantom videos that share geometry but differ in view."""
    videos = []
    truth = None
    for i, view in enumerate(views):
        vspec = PhantomSpec(**{**asdict(spec), "view": view, "seed": spec.seed * 101 + i})
        video, _, t = generate_phantom(vspec)
        truth = truth or t
        videos.append(video)
    sid = study_id or f"phantom-{spec.seed}"
    reference = truth.indexed() if with_reference else {}
    return StudyBundle(
        study_id=sid,
        videos=videos,
        manual_reference=reference,
        body_surface_area=spec.body_surface_area,
        extra={"phantom_spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
               "analytic_truth": truth.to_dict()},
    ), truth
