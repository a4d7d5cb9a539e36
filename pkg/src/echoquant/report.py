"""Deterministic JSON, CSV and SVG output.

SVG plots are self-contained and carry their plotted numbers as ``data-*``
attributes, formatted with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import quoteattr

import numpy as np


class ReportError(OSError):
    pass


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if hasattr(obj, "isoformat"):
        return obj.isoformat()
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc
    return path


def write_json(obj, path) -> Path:
    return _write(Path(path), dumps(obj))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    return _write(Path(path), csv_text(header, rows))


def _num(x) -> str:
    return repr(float(x))


class _Canvas:
    """Linear data-to-pixel mapping inside fixed margins."""

    def __init__(self, xs, ys, width=640, height=400, margin=50):
        xs = np.asarray(list(xs), dtype=float)
        ys = np.asarray(list(ys), dtype=float)
        self.w, self.h, self.m = width, height, margin
        self.x0, self.x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
        self.y0, self.y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y1 + 1

    def px(self, x):
        return self.m + (x - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.m)

    def py(self, y):
        return self.h - self.m - (y - self.y0) / (self.y1 - self.y0) * (self.h - 2 * self.m)

    def header(self, title: str, **attrs) -> list[str]:
        extra = "".join(f" data-{k.replace('_', '-')}={quoteattr(str(v))}" for k, v in sorted(attrs.items()))
        return [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
            f'viewBox="0 0 {self.w} {self.h}"{extra}>',
            f"<title>{title}</title>",
            f'<rect x="0" y="0" width="{self.w}" height="{self.h}" fill="white"/>',
            f'<line x1="{self.m}" y1="{self.h - self.m}" x2="{self.w - self.m}" y2="{self.h - self.m}" stroke="black"/>',
            f'<line x1="{self.m}" y1="{self.m}" x2="{self.m}" y2="{self.h - self.m}" stroke="black"/>',
        ]

    def hline(self, y, cls: str, color: str, **attrs) -> str:
        extra = "".join(f" data-{k.replace('_', '-')}={quoteattr(str(v))}" for k, v in sorted(attrs.items()))
        return (f'<line class="{cls}" x1="{self.m}" x2="{self.w - self.m}" y1="{self.py(y):.2f}" '
                f'y2="{self.py(y):.2f}" stroke="{color}" stroke-dasharray="4 3"{extra}/>')


def bland_altman_svg(summary, metric: str = "") -> str:
    """Difference versus mean scatter with the median line and absolute-deviation bands."""
    means = np.asarray(summary.means, dtype=float)
    diffs = np.asarray(summary.differences, dtype=float)
    bands = {"50": summary.band50, "75": summary.band75, "95": summary.band95}
    ys = list(diffs) + [summary.median_difference + b for b in bands.values()] + \
        [summary.median_difference - b for b in bands.values()]
    cv = _Canvas(means, ys)
    out = cv.header(f"Bland-Altman {metric}".strip(), metric=metric, n=summary.n,
                    median_difference=_num(summary.median_difference))
    out.append(cv.hline(summary.median_difference, "median", "black", value=_num(summary.median_difference)))
    colors = {"50": "#1b9e77", "75": "#d95f02", "95": "#7570b3"}
    for q, b in bands.items():
        for sign, side in ((1, "upper"), (-1, "lower")):
            out.append(cv.hline(summary.median_difference + sign * b, f"band band-{q} {side}", colors[q],
                                percentile=q, value=_num(b)))
    for m, d in zip(means, diffs):
        out.append(f'<circle class="point" cx="{cv.px(m):.2f}" cy="{cv.py(d):.2f}" r="3" fill="#333" '
                   f'data-mean="{_num(m)}" data-diff="{_num(d)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def trajectory_svg(fit, patient: str = "") -> str:
    """Strain points, the fitted spline, the threshold line and therapy markers."""
    ys = list(fit.strain) + list(fit.grid_values) + [fit.threshold]
    cv = _Canvas(fit.grid_days if len(fit.grid_days) else fit.days, ys)
    out = cv.header(f"Strain trajectory {patient}".strip(), patient=patient, method=fit.method,
                    threshold=_num(fit.threshold))
    out.append(cv.hline(fit.threshold, "threshold", "red", value=_num(fit.threshold)))
    path = " ".join(f"{cv.px(x):.2f},{cv.py(y):.2f}" for x, y in zip(fit.grid_days, fit.grid_values))
    out.append(f'<polyline class="spline" fill="none" stroke="#1f78b4" points="{path}" '
               f'data-day="{" ".join(_num(x) for x in fit.grid_days)}" '
               f'data-value="{" ".join(_num(v) for v in fit.grid_values)}"/>')
    for d, x, s in zip(fit.dates, fit.days, fit.strain):
        out.append(f'<circle class="point" cx="{cv.px(x):.2f}" cy="{cv.py(s):.2f}" r="4" fill="#333" '
                   f'data-date="{d.isoformat()}" data-day="{_num(x)}" data-strain="{_num(s)}"/>')
    for ev in fit.therapy_events:
        for key in ("start", "stop"):
            if ev.get(key) is None:
                continue
            day = (_dt.date.fromisoformat(str(ev[key])) - fit.dates[0]).days
            x = cv.px(day)
            out.append(f'<line class="therapy {key}" x1="{x:.2f}" x2="{x:.2f}" y1="{cv.m}" y2="{cv.h - cv.m}" '
                       f'stroke="gray" data-day="{_num(day)}" data-label={quoteattr(str(ev.get("label", "")))}/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: dict, out_dir, strain_traces: dict | None = None) -> dict[str, Path]:
    """Write ``<out_dir>/<study_id>/`` with report.json, measurements.csv and strain CSVs."""
    if not report:
        raise ReportError("empty report")
    study = str(report.get("study_id", "study"))
    base = Path(out_dir) / study
    written = {"report": write_json(report, base / "report.json")}
    metrics = (report.get("measurements") or {}).get("metrics", {})
    if metrics:
        rows = [(k, m.get("value"), m.get("raw_value"), m.get("units"), m.get("n_videos"))
                for k, m in sorted(metrics.items())]
        written["measurements"] = write_csv(base / "measurements.csv",
                                            ["metric", "value", "raw_value", "units", "n_videos"], rows)
    for vid, per_frame in sorted((strain_traces or {}).items()):
        written[f"strain_{vid}"] = write_csv(base / f"strain_{vid}.csv", ["frame", "strain_percent"],
                                             [(i, float(v)) for i, v in enumerate(per_frame)])
    return written
