import csv
import datetime as dt
import io
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from echoquant.report import (
    ReportError,
    bland_altman_svg,
    csv_text,
    dumps,
    emit_report,
    jsonable,
    trajectory_svg,
    write_json,
)
from echoquant.stats import bland_altman_summary, strain_trajectory

SVG = "{http://www.w3.org/2000/svg}"


def _report():
    return {
        "study_id": "st-9",
        "acquisition_date": dt.date(2022, 5, 1),
        "measurements": {"metrics": {
            "lvef": {"value": 61.25, "raw_value": 61.25, "units": "%", "n_videos": 2},
            "lvedvi": {"value": np.float64(55.5), "raw_value": 105.45, "units": "mL/kg/m^2", "n_videos": 2},
        }},
        "strain": {"gls": 15.2},
        "summary": {"lvef": 61.25, "gls": 15.2, "missing": float("nan")},
    }


def test_jsonable_converts_numpy_and_nonfinite():
    out = jsonable({"a": np.int64(3), "b": np.array([1.5, np.inf]), "c": np.bool_(True), 4: (1, 2)})
    assert out == {"a": 3, "b": [1.5, None], "c": True, "4": [1, 2]}
    assert isinstance(out["a"], int)


def test_dumps_sorted_and_deterministic():
    a = dumps({"z": 1, "a": {"y": 2, "b": 3}})
    assert a == dumps({"a": {"b": 3, "y": 2}, "z": 1})
    assert a.index('"a"') < a.index('"z"') and a.endswith("\n")


def test_emit_report_files_and_byte_identity(tmp_path):
    files = emit_report(_report(), tmp_path, {"00_a4c": [0.0, -5.5, -15.0]})
    assert set(files) == {"report", "measurements", "strain_00_a4c"}
    first = {k: p.read_bytes() for k, p in files.items()}
    emit_report(_report(), tmp_path, {"00_a4c": [0.0, -5.5, -15.0]})
    assert {k: p.read_bytes() for k, p in files.items()} == first
    data = json.loads(first["report"])
    assert data["summary"]["lvef"] == 61.25 and data["strain"]["gls"] == 15.2
    assert data["summary"]["missing"] is None and data["acquisition_date"] == "2022-05-01"
    rows = first["measurements"].decode().splitlines()
    assert rows[0] == "metric,value,raw_value,units,n_videos"
    assert rows[1].startswith("lvedvi,55.5,105.45,mL/kg/m^2,2")
    assert first["strain_00_a4c"].decode().splitlines()[2] == "1,-5.5"


def test_emit_empty_report(tmp_path):
    with pytest.raises(ReportError):
        emit_report({}, tmp_path)


def test_unwritable_target(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError):
        write_json({"a": 1}, blocker / "sub" / "r.json")


def test_csv_floats_round_trip():
    x = 0.1 + 0.2
    text = csv_text(["v"], [[x], [None]])
    assert float(text.splitlines()[1]) == x
    # a lone empty field is quoted so the row is not read as a blank line
    assert list(csv.reader(io.StringIO(text)))[2] == [""]


def test_bland_altman_svg_values_match_json():
    rng = np.random.default_rng(0)
    manual = rng.uniform(40, 70, 25)
    auto = manual + rng.normal(0, 3, 25)
    s = bland_altman_summary(auto, manual)
    js = json.loads(dumps(s.to_dict()))
    root = ET.fromstring(bland_altman_svg(s, "lvef"))
    bands = {}
    for line in root.iter(SVG + "line"):
        if line.get("data-percentile"):
            bands[line.get("data-percentile")] = float(line.get("data-value"))
        elif "median" in (line.get("class") or ""):
            assert round(float(line.get("data-value")), 6) == round(js["median_difference"], 6)
    assert {k: round(v, 6) for k, v in bands.items()} == \
        {k: round(v, 6) for k, v in js["abs_deviation_percentiles"].items()}
    points = [(float(c.get("data-mean")), float(c.get("data-diff"))) for c in root.iter(SVG + "circle")]
    assert len(points) == 25
    assert [round(d, 6) for _, d in points] == [round(d, 6) for d in auto - manual]


def test_trajectory_svg_values_match_json():
    pts = [("2021-01-01", 19.0), ("2021-02-15", 17.0), ("2021-04-01", 15.5), ("2021-06-20", 16.2),
           ("2021-09-01", 18.4)]
    fit = strain_trajectory(pts, [{"start": "2021-02-01", "stop": "2021-05-01", "label": "chemo"}])
    js = json.loads(dumps(fit.to_dict()))
    root = ET.fromstring(trajectory_svg(fit, "p1"))
    assert float(root.get("data-threshold")) == 16.0
    circles = list(root.iter(SVG + "circle"))
    assert [round(float(c.get("data-strain")), 6) for c in circles] == \
        [round(p["strain"], 6) for p in js["points"]]
    poly = next(root.iter(SVG + "polyline"))
    vals = [float(v) for v in poly.get("data-value").split()]
    assert [round(v, 6) for v in vals] == [round(v, 6) for v in js["grid"]["value"]]
    therapy = [ln for ln in root.iter(SVG + "line") if "therapy" in (ln.get("class") or "")]
    assert [float(t.get("data-day")) for t in therapy] == [31.0, 120.0]
    assert all(math.isfinite(float(c.get("cx"))) for c in circles)
