"""Study-level orchestration: mask, classify, route, segment, quantify, strain, disease, report.

Every study is processed by a pure function of (bundle, config) so studies
can be fanned out over processes with identical results.
"""

from __future__ import annotations

import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import StudyBundle, apply_static_mask, compute_static_mask, load_bundle
from .config import PipelineConfig
from .disease import (
    DISEASE_VIEWS,
    DiseaseError,
    ExternalDiseaseModel,
    MockDiseaseModel,
    aggregate_disease_score,
    extract_phased_pair,
    phasing_trace,
    score_video,
)
from .numerics import median
from .quantify import chamber_trace, cycle_window_plan, quantify_study, window_values
from .report import emit_report, write_json
from .segmentation import ExternalSegmentationBackend, PhantomOracleBackend, SegmentationError, segment_video
from .strain import StrainError, video_strain
from .views import ExternalClassifier, MockClassifier, ViewLabel, classify_study, compute_vpqs, route_views

logger = logging.getLogger(__name__)

STRAIN_VIEWS = (ViewLabel.A4C, ViewLabel.A2C)
VOLUME_VIEWS = (ViewLabel.A4C, ViewLabel.A2C)


def make_classifier(cfg: PipelineConfig):
    if cfg.classifier.kind == "external":
        return ExternalClassifier(tuple(cfg.classifier.command), cfg.classifier.timeout)
    return MockClassifier(confidence=cfg.classifier.confidence)


def make_segmenter(cfg: PipelineConfig):
    if cfg.segmentation.kind == "external":
        return ExternalSegmentationBackend(tuple(cfg.segmentation.command), cfg.segmentation.timeout)
    return PhantomOracleBackend()


def make_disease_model(cfg: PipelineConfig):
    d = cfg.disease
    if d.kind == "none":
        return None
    if d.kind == "external":
        return ExternalDiseaseModel(tuple(d.command), d.timeout)
    return MockDiseaseModel(gain=d.gain, center=d.center, jitter=d.jitter, seed=cfg.stats.seed)


def video_ids(bundle: StudyBundle) -> list[str]:
    """Stable, unique identifiers for the bundle's videos."""
    ids = []
    for i, v in enumerate(bundle.videos):
        stem = Path(v.name).stem if v.name else ""
        ids.append(f"{i:02d}_{stem}" if stem else f"{i:02d}")
    return ids


def process_study(bundle: StudyBundle, cfg: PipelineConfig | None = None) -> tuple[dict, dict[str, list[float]]]:
    """Run every stage on one study.

    Returns the report dictionary and the per-video strain traces (percent
    per frame) for CSV output.
    """
    cfg = cfg or PipelineConfig()
    flags: list[str] = []
    ids = video_ids(bundle)

    # the static mask only feeds the classifier; measurement stages see the original frames
    masked = []
    for vid, video in zip(ids, bundle.videos):
        try:
            mask = compute_static_mask(video, min(cfg.mask.sample_count, video.n_frames), cfg.mask.static_fraction)
            masked.append(apply_static_mask(video, mask))
        except ValueError as exc:
            flags.append(f"{vid}: static mask skipped ({exc})")
            masked.append(video)
    masked_bundle = StudyBundle(study_id=bundle.study_id, videos=masked)
    predictions = classify_study(make_classifier(cfg), masked_bundle)
    vpqs = compute_vpqs(predictions)
    routes = route_views(predictions, bundle)
    for vid, pred in zip(ids, predictions):
        if pred.error:
            flags.append(f"{vid}: classification failed ({pred.error})")
        elif pred.assigned_view not in {v for v in routes}:
            flags.append(f"{vid}: view {pred.assigned_view} not quantified")
    if not routes:
        flags.append("no quantifiable views")

    segmenter = make_segmenter(cfg)
    model = make_disease_model(cfg)
    windows: dict[str, dict[str, list[float]]] = {}
    strain_out: dict[str, dict] = {}
    traces_out: dict[str, list[float]] = {}
    disease_rounds: dict[str, list[float]] = {}
    disease_views: dict[str, str] = {}
    provenance: dict[str, dict] = {}

    for view, indices in sorted(routes.items(), key=lambda kv: kv[0].value):
        for i in indices:
            vid, video = ids[i], bundle.videos[i]
            prov = {"view": view.value, "view_probability": predictions[i].assigned_probability,
                    "frames": video.n_frames}
            provenance[vid] = prov
            try:
                segs = segment_video(segmenter, video, view)
            except SegmentationError as exc:
                flags.append(f"{vid}: segmentation failed ({exc})")
                prov["error"] = str(exc)
                continue

            if view in VOLUME_VIEWS:
                trace = chamber_trace(segs, video.metadata)
                plan = cycle_window_plan(trace, window_fraction=cfg.quantify.window_fraction,
                                         step_fraction=cfg.quantify.step_fraction)
                prov["windows"] = len(plan.windows)
                if plan.insufficient_frames:
                    flags.append(f"{vid}: insufficient frames for one cycle window")
                else:
                    vflags: list[str] = []
                    windows[vid] = window_values(trace, plan, vflags)
                    flags.extend(f"{vid}: {f}" for f in vflags)

            if view in STRAIN_VIEWS:
                try:
                    res = video_strain(video, segs, cfg.strain)
                    strain_out[vid] = res.to_dict()
                    traces_out[vid] = res.per_frame()
                    flags.extend(f"{vid}: strain {f}" for f in res.flags if "strain withheld" in f)
                except StrainError as exc:
                    flags.append(f"{vid}: strain failed ({exc})")

            if model is not None and view in DISEASE_VIEWS:
                try:
                    pair = extract_phased_pair(video, phasing_trace(segs, view), view)
                    if pair.low_confidence:
                        flags.append(f"{vid}: flat phasing trace, ED/ES pair low-confidence")
                    disease_rounds[vid] = score_video(model, pair, cfg.disease.rounds)
                    disease_views[vid] = view.value
                    prov["ed_frame"], prov["es_frame"] = pair.ed_frame, pair.es_frame
                except (DiseaseError, OSError, ValueError) as exc:
                    flags.append(f"{vid}: disease scoring failed ({exc})")

    measurements = quantify_study(windows, bundle.body_surface_area, vpqs=vpqs,
                                  la_threshold=cfg.quantify.la_lv_min_ratio,
                                  video_percentile=cfg.quantify.video_percentile or None,
                                  study_percentile=cfg.quantify.study_percentile or None) if windows else None

    gls_values = [s["gls"] for _, s in sorted(strain_out.items()) if s["gls"] is not None]
    als_values = [s["average_ls"] for _, s in sorted(strain_out.items()) if s["average_ls"] is not None]
    strain_block = {
        "gls": median(gls_values) if gls_values else None,
        "average_ls": median(als_values) if als_values else None,
        "n_videos": len(gls_values),
        "per_video": strain_out,
    }
    if strain_out and not gls_values:
        flags.append("strain: no video passed the particle-quality floor")

    disease_block = None
    if disease_rounds:
        try:
            disease_block = aggregate_disease_score(disease_rounds, disease_views).to_dict()
        except DiseaseError as exc:
            flags.append(f"disease: {exc}")

    summary = {"vpqs": vpqs, "gls": strain_block["gls"], "average_ls": strain_block["average_ls"],
               "disease_score": disease_block["score"] if disease_block else None}
    if measurements is not None:
        for name in ("lvedvi", "lvesvi", "lvef", "lavoli", "lvmi"):
            summary[name] = measurements.value(name)
        flags.extend(measurements.flags)

    report = {
        "study_id": bundle.study_id,
        "patient_id": bundle.patient_id,
        "acquisition_date": bundle.acquisition_date,
        "version": __version__,
        "vpqs": vpqs,
        "views": {vid: p.to_dict() for vid, p in zip(ids, predictions)},
        "routes": {v.value: [ids[i] for i in idx] for v, idx in sorted(routes.items(), key=lambda kv: kv[0].value)},
        "measurements": measurements.to_dict() if measurements else None,
        "strain": strain_block,
        "disease_scores": disease_block,
        "summary": summary,
        "manual_reference": dict(sorted(bundle.manual_reference.items())),
        "provenance": provenance,
        "flags": flags,
    }
    return report, traces_out


@dataclass
class StudyOutcome:
    path: str
    study_id: str | None
    ok: bool
    report: dict | None = None
    traces: dict = field(default_factory=dict)
    error: str | None = None


def _run_one(args) -> StudyOutcome:
    path, cfg = args
    try:
        bundle = load_bundle(path)
        report, traces = process_study(bundle, cfg)
        return StudyOutcome(str(path), bundle.study_id, True, report, traces)
    except Exception as exc:  # noqa: BLE001 - one broken study must not stop the batch
        logger.error("study %s failed: %s", path, exc)
        return StudyOutcome(str(path), None, False,
                            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}")


def run_pipeline(bundle_paths, cfg: PipelineConfig | None = None, out_dir=None) -> tuple[list[StudyOutcome], dict]:
    """Process bundles (in parallel when ``cfg.jobs > 1``) and optionally write outputs.

    Results are returned in input order whatever the scheduling; reports are
    written by the calling process only.
    """
    cfg = cfg or PipelineConfig()
    paths = [str(p) for p in bundle_paths]
    if not paths:
        raise ValueError("no bundles given")
    work = [(p, cfg) for p in paths]
    if cfg.jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_run_one, work, chunksize=1))
    else:
        outcomes = [_run_one(w) for w in work]

    summary = {
        "version": __version__,
        "n_studies": len(outcomes),
        "n_succeeded": sum(o.ok for o in outcomes),
        "n_failed": sum(not o.ok for o in outcomes),
        "studies": [{"path": o.path, "study_id": o.study_id, "ok": o.ok,
                     "error": o.error.splitlines()[0] if o.error else None} for o in outcomes],
    }
    if out_dir is not None:
        out = Path(out_dir)
        seen: set[str] = set()
        for o in outcomes:
            if o.ok:
                if o.study_id in seen:
                    raise ValueError(f"duplicate study_id {o.study_id}")
                seen.add(o.study_id)
                emit_report(o.report, out, o.traces)
        write_json(summary, out / "run_summary.json")
    return outcomes, summary


def exit_code(summary: dict) -> int:
    if summary["n_failed"] == 0:
        return 0
    return 2 if summary["n_succeeded"] else 1


def study_values(report: dict) -> dict[str, float | None]:
    """Flat auto-measured values keyed like ``manual_reference``."""
    s = report.get("summary") or {}
    return {k: s.get(k) for k in ("lvedvi", "lvesvi", "lvef", "lavoli", "lvmi", "gls")}


def as_array(values) -> np.ndarray:
    return np.asarray([np.nan if v is None else v for v in values], dtype=float)


def _views_for(bundle: StudyBundle, cfg: PipelineConfig) -> list[ViewLabel]:
    """Manifest view labels where present, classifier output otherwise."""
    if all(v.view_label is not None for v in bundle.videos):
        return [ViewLabel.parse(v.view_label) for v in bundle.videos]
    preds = classify_study(make_classifier(cfg), bundle)
    return [p.assigned_view for p in preds]


def strain_only(bundle: StudyBundle, cfg: PipelineConfig | None = None) -> tuple[dict, dict[str, list[float]]]:
    """Strain of every apical video; study GLS is the median over videos."""
    cfg = cfg or PipelineConfig()
    segmenter = make_segmenter(cfg)
    out: dict[str, dict] = {}
    traces: dict[str, list[float]] = {}
    flags: list[str] = []
    for vid, video, view in zip(video_ids(bundle), bundle.videos, _views_for(bundle, cfg)):
        if view not in STRAIN_VIEWS:
            continue
        try:
            res = video_strain(video, segment_video(segmenter, video, view), cfg.strain)
        except (SegmentationError, StrainError) as exc:
            flags.append(f"{vid}: {exc}")
            continue
        out[vid] = res.to_dict()
        traces[vid] = res.per_frame()
    gls = [s["gls"] for _, s in sorted(out.items()) if s["gls"] is not None]
    als = [s["average_ls"] for _, s in sorted(out.items()) if s["average_ls"] is not None]
    return {"study_id": bundle.study_id, "gls": median(gls) if gls else None,
            "average_ls": median(als) if als else None, "per_video": out, "flags": flags}, traces


def quantify_only(bundle: StudyBundle, cfg: PipelineConfig | None = None) -> dict:
    """Structure and function measurements without strain or disease scoring."""
    cfg = cfg or PipelineConfig()
    segmenter = make_segmenter(cfg)
    windows: dict[str, dict[str, list[float]]] = {}
    flags: list[str] = []
    for vid, video, view in zip(video_ids(bundle), bundle.videos, _views_for(bundle, cfg)):
        if view not in VOLUME_VIEWS:
            continue
        try:
            trace = chamber_trace(segment_video(segmenter, video, view), video.metadata)
        except SegmentationError as exc:
            flags.append(f"{vid}: {exc}")
            continue
        plan = cycle_window_plan(trace, window_fraction=cfg.quantify.window_fraction,
                                 step_fraction=cfg.quantify.step_fraction)
        if plan.insufficient_frames:
            flags.append(f"{vid}: insufficient frames for one cycle window")
            continue
        windows[vid] = window_values(trace, plan, flags)
    if not windows:
        return {"study_id": bundle.study_id, "measurements": None, "flags": flags + ["no quantifiable videos"]}
    ms = quantify_study(windows, bundle.body_surface_area, la_threshold=cfg.quantify.la_lv_min_ratio,
                        video_percentile=cfg.quantify.video_percentile or None,
                        study_percentile=cfg.quantify.study_percentile or None, flags=flags)
    return {"study_id": bundle.study_id, "measurements": ms.to_dict(), "flags": ms.flags}
