"""Report emission in text, CSV or JSON-lines form.

Every report type is reduced to ``(summary: dict, rows: list[dict])``.
JSON-lines output puts the summary on the first line, then one row per
line; CSV carries only the rows; text is a human summary.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any

FORMATS = ("text", "csv", "json-lines")


def _flatten(report: Any) -> tuple[dict, list[dict]]:
    from .attacks import AttackResult
    from .bench import BenchResult
    from .scenario import FairnessResult, RunReport

    if isinstance(report, RunReport):
        return report.summary(), [asdict(s) for s in report.sessions]
    if isinstance(report, FairnessResult):
        summary = {
            "service": report.service, "n_sessions": report.n_sessions, "chi2": report.chi2,
            "p_value": report.p_value, "alpha": report.alpha, "passed": report.passed,
        }
        rows = [{"es": es, "count": c, "expected": report.expected[es], "share": report.shares()[es]}
                for es, c in sorted(report.counts.items())]
        return summary, rows
    if isinstance(report, BenchResult):
        return report.summary(), report.as_rows()
    if isinstance(report, list) and all(isinstance(r, AttackResult) for r in report):
        rows = [{"attack": r.name, "expected": "/".join(r.expected), "runs": r.runs, "rejected": r.rejected,
                 "passed": r.passed, "first_failure": r.failures[0] if r.failures else ""} for r in report]
        return {"attacks": len(rows), "all_rejected": all(r["passed"] for r in rows)}, rows
    if is_dataclass(report):
        return asdict(report), []
    raise TypeError(f"cannot emit {type(report).__name__}")


def _cell(v: Any) -> Any:
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, float):
        return round(v, 6)
    return v


def _jsonable(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return _cell(v)


def render(report: Any, fmt: str = "text") -> str:
    summary, rows = _flatten(report)
    if fmt == "json-lines":
        lines = [json.dumps(_jsonable(summary), sort_keys=True)]
        lines += [json.dumps(_jsonable(r), sort_keys=True) for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _cell(v) for k, v in r.items()})
        return buf.getvalue()
    if fmt == "text":
        out = [f"{k}: {json.dumps(_jsonable(v), sort_keys=True)}" for k, v in summary.items()]
        if rows and len(rows) <= 50:
            out.append("")
            out += ["  " + ", ".join(f"{k}={_cell(v)}" for k, v in r.items()) for r in rows]
        elif rows:
            out.append(f"({len(rows)} rows; use --format csv or json-lines for detail)")
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")


def emit_report(report: Any, fmt: str = "text", out: str | Path | None = None) -> str:
    """Render and optionally write to ``out``; returns the rendered text."""
    text = render(report, fmt)
    if out is not None:
        Path(out).write_text(text)
    return text
