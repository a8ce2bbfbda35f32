import csv
import io
import json

import pytest

from sa2fe.attacks import AttackResult
from sa2fe.report import FORMATS, emit_report, render
from sa2fe.scenario import FairnessResult, RunReport, SessionOutcome


def sample_report():
    rep = RunReport("demo", "universal_reenc", 1, trace_digest="ab")
    rep.sessions = [SessionOutcome(0, "s1", "success", "", "e1", True),
                    SessionOutcome(1, "s2", "rejected", "NoProviders", None, False)]
    return rep


def test_json_lines():
    lines = render(sample_report(), "json-lines").splitlines()
    head = json.loads(lines[0])
    assert head["scenario"] == "demo" and head["sessions"] == 2 and head["success"] == 1
    assert [json.loads(x)["reason"] for x in lines[1:]] == ["", "NoProviders"]


def test_csv():
    rows = list(csv.DictReader(io.StringIO(render(sample_report(), "csv"))))
    assert [r["es"] for r in rows] == ["e1", ""] and rows[1]["status"] == "rejected"


def test_text_and_file(tmp_path):
    text = emit_report(sample_report(), "text", tmp_path / "r.txt")
    assert "scenario: \"demo\"" in text and "reason=NoProviders" in text
    assert (tmp_path / "r.txt").read_text() == text


def test_other_report_kinds():
    fr = FairnessResult("s1", 10, {"e1": 6, "e3": 4}, {"e1": 5.0, "e3": 5.0}, 0.4, 0.52, 0.01)
    assert json.loads(render(fr, "json-lines").splitlines()[0])["passed"] is True
    ar = [AttackResult("x", ("A",), runs=1, rejected=1)]
    assert json.loads(render(ar, "json-lines").splitlines()[1])["attack"] == "x"
    for fmt in FORMATS:
        render(fr, fmt)


def test_bad_format_and_type():
    with pytest.raises(ValueError):
        render(sample_report(), "xml")
    with pytest.raises(TypeError):
        render(object(), "text")
