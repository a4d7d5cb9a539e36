"""``echoquant`` command-line interface."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from .bundle import BundleError, load_bundle, write_bundle
from .config import ConfigError, PipelineConfig
from .phantom import PhantomSpec, phantom_bundle, spec_for_ef
from .pipeline import exit_code, quantify_only, run_pipeline, strain_only, study_values
from .report import bland_altman_svg, dumps, emit_report, trajectory_svg, write_csv, write_json
from .stats import bland_altman_summary, consistency_bootstrap, strain_trajectory

logger = logging.getLogger("echoquant")

COMPARED = ("lvedvi", "lvesvi", "lvef", "lavoli", "lvmi", "gls")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(seed=args.seed, jobs=args.jobs)


def _emit(obj, out_path: Path | None = None) -> None:
    text = dumps(obj)
    sys.stdout.write(text)
    if out_path is not None:
        write_json(obj, out_path)


def cmd_run(args) -> int:
    cfg = _config(args)
    _, summary = run_pipeline(args.bundles, cfg, args.out_dir)
    _emit(summary)
    return exit_code(summary)


def cmd_ingest_validate(args) -> int:
    rows = []
    for path in args.bundles:
        try:
            b = load_bundle(path)
            rows.append({"path": str(path), "ok": True, "study_id": b.study_id, "n_videos": len(b.videos),
                         "videos": [{"name": v.name, "frames": v.n_frames, "shape": list(v.shape),
                                     "view": v.view_label} for v in b.videos]})
        except (BundleError, OSError, KeyError, ValueError) as exc:
            rows.append({"path": str(path), "ok": False, "error": f"{type(exc).__name__}: {exc}"})
    ok = sum(r["ok"] for r in rows)
    summary = {"n_studies": len(rows), "n_succeeded": ok, "n_failed": len(rows) - ok, "studies": rows}
    _emit(summary, Path(args.out_dir) / "ingest_summary.json" if args.out_dir else None)
    return exit_code(summary)


def cmd_phantom_generate(args) -> int:
    kw = {"seed": args.seed or 0, "frames": args.frames, "noise": args.noise,
          "translation": tuple(args.translation), "body_surface_area": args.bsa}
    if args.ef is not None:
        spec = spec_for_ef(args.ef, args.gls / 100.0, **kw)
    else:
        spec = PhantomSpec(longitudinal_strain=args.gls / 100.0, short_axis_contraction=args.contraction, **kw)
    bundle, truth = phantom_bundle(spec, views=tuple(args.views.split(",")), study_id=args.study_id)
    if args.patient_id or args.date:
        from dataclasses import replace

        bundle = replace(bundle, patient_id=args.patient_id,
                         acquisition_date=_dt.date.fromisoformat(args.date) if args.date else None)
    root = write_bundle(bundle, args.out)
    _emit({"bundle": str(root), "analytic_truth": truth.to_dict(), "reference": truth.indexed()})
    return 0


def _per_bundle(args, fn) -> int:
    cfg = _config(args)
    results, failed = [], 0
    for path in args.bundles:
        try:
            results.append(fn(load_bundle(path), cfg))
        except Exception as exc:  # noqa: BLE001 - report and continue with the next bundle
            failed += 1
            results.append({"path": str(path), "error": f"{type(exc).__name__}: {exc}"})
    _emit(results if len(results) > 1 else results[0])
    summary = {"n_failed": failed, "n_succeeded": len(results) - failed}
    return exit_code(summary)


def cmd_strain_only(args) -> int:
    def fn(bundle, cfg):
        result, traces = strain_only(bundle, cfg)
        if args.out_dir:
            base = Path(args.out_dir) / bundle.study_id
            write_json(result, base / "strain.json")
            for vid, pf in sorted(traces.items()):
                write_csv(base / f"strain_{vid}.csv", ["frame", "strain_percent"], list(enumerate(pf)))
        return result

    return _per_bundle(args, fn)


def cmd_quantify_only(args) -> int:
    def fn(bundle, cfg):
        result = quantify_only(bundle, cfg)
        if args.out_dir:
            write_json(result, Path(args.out_dir) / bundle.study_id / "measurements.json")
        return result

    return _per_bundle(args, fn)


def cmd_compare(args) -> int:
    cfg = _config(args)
    outcomes, summary = run_pipeline(args.bundles, cfg, args.out_dir)
    pairs: dict[str, tuple[list, list]] = {m: ([], []) for m in COMPARED}
    for o in outcomes:
        if not o.ok:
            continue
        auto = study_values(o.report)
        manual = o.report.get("manual_reference") or {}
        for m in COMPARED:
            if auto.get(m) is not None and manual.get(m) is not None:
                pairs[m][0].append(auto[m])
                pairs[m][1].append(manual[m])
    result = {}
    for m, (a, r) in pairs.items():
        if not a:
            continue
        s = bland_altman_summary(a, r)
        result[m] = s.to_dict()
        if args.out_dir:
            (Path(args.out_dir) / f"bland_altman_{m}.svg").write_text(bland_altman_svg(s, m), encoding="utf-8")
    out = {"agreement": result, "run": summary}
    _emit(out, Path(args.out_dir) / "compare.json" if args.out_dir else None)
    return exit_code(summary)


def cmd_consistency(args) -> int:
    cfg = _config(args)
    data = json.loads(Path(args.input).read_text(encoding="utf-8"))
    iterations = args.iterations or cfg.stats.iterations
    res = consistency_bootstrap(data, iterations=iterations, seed=cfg.stats.seed)
    _emit(res.to_dict(), Path(args.out_dir) / "consistency.json" if args.out_dir else None)
    return 0


def cmd_trajectory(args) -> int:
    cfg = _config(args)
    outcomes, summary = run_pipeline(args.bundles, cfg, None)
    events: dict[str, list] = {}
    if args.events:
        events = json.loads(Path(args.events).read_text(encoding="utf-8"))
    points: dict[str, list] = {}
    for o in outcomes:
        if not o.ok:
            continue
        r = o.report
        gls = (r.get("strain") or {}).get("gls")
        if r.get("acquisition_date") is None or gls is None:
            logger.warning("%s: missing date or strain, skipped", o.path)
            continue
        points.setdefault(str(r.get("patient_id") or r["study_id"]), []).append((r["acquisition_date"], gls))
    fits = {}
    for patient, pts in sorted(points.items()):
        if len(pts) < 2:
            fits[patient] = {"error": "fewer than 2 dated strain values"}
            continue
        fit = strain_trajectory(pts, events.get(patient, []), threshold=cfg.stats.trajectory_threshold)
        fits[patient] = fit.to_dict()
        if args.out_dir:
            svg = Path(args.out_dir) / f"trajectory_{patient}.svg"
            svg.parent.mkdir(parents=True, exist_ok=True)
            svg.write_text(trajectory_svg(fit, patient), encoding="utf-8")
    out = {"trajectories": fits, "run": summary}
    _emit(out, Path(args.out_dir) / "trajectory.json" if args.out_dir else None)
    return exit_code(summary)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML pipeline configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides stats.seed")
    common.add_argument("--jobs", type=int, default=None, help="parallel studies (overrides config)")
    common.add_argument("--out-dir", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="echoquant", description="Echo quantification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="full pipeline over bundles")
    s.add_argument("bundles", nargs="+")
    s.set_defaults(func=cmd_run, default_out="echoquant_out")

    s = sub.add_parser("ingest-validate", parents=[common], help="load and validate bundles")
    s.add_argument("bundles", nargs="+")
    s.set_defaults(func=cmd_ingest_validate)

    s = sub.add_parser("phantom-generate", parents=[common], help="write a synthetic phantom bundle")
    s.add_argument("--out", required=True, help="bundle directory to create")
    s.add_argument("--gls", type=float, default=-15.0, help="prescribed longitudinal strain, percent")
    s.add_argument("--ef", type=float, default=None, help="target ejection fraction, percent")
    s.add_argument("--contraction", type=float, default=0.2, help="short-axis fractional contraction")
    s.add_argument("--views", default="A4c", help="comma-separated views (A4c, A2c, PLAX)")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--translation", type=float, nargs=2, default=(0.0, 0.0), metavar=("ROWS", "COLS"),
                   help="rigid drift in pixels per frame")
    s.add_argument("--bsa", type=float, default=1.9)
    s.add_argument("--study-id", default=None)
    s.add_argument("--patient-id", default=None)
    s.add_argument("--date", default=None, help="acquisition date, YYYY-MM-DD")
    s.set_defaults(func=cmd_phantom_generate)

    s = sub.add_parser("strain-only", parents=[common], help="speckle-tracking strain only")
    s.add_argument("bundles", nargs="+")
    s.set_defaults(func=cmd_strain_only)

    s = sub.add_parser("quantify-only", parents=[common], help="volumes, EF and mass only")
    s.add_argument("bundles", nargs="+")
    s.set_defaults(func=cmd_quantify_only)

    s = sub.add_parser("compare", parents=[common], help="automated vs manual_reference agreement")
    s.add_argument("bundles", nargs="+")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("consistency", parents=[common], help="internal-consistency bootstrap")
    s.add_argument("input", help="JSON mapping name -> {auto_x, auto_y, manual_x, manual_y}")
    s.add_argument("--iterations", type=int, default=None)
    s.set_defaults(func=cmd_consistency)

    s = sub.add_parser("trajectory", parents=[common], help="per-patient strain trajectories")
    s.add_argument("bundles", nargs="+")
    s.add_argument("--events", default=None, help="JSON mapping patient -> [{start, stop, label}]")
    s.set_defaults(func=cmd_trajectory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 is reserved for partial batch failure here
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out_dir is None and getattr(args, "default_out", None):
        args.out_dir = args.default_out
    try:
        return args.func(args)
    except (ConfigError, BundleError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
