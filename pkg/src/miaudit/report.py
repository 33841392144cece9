"""CSV / JSON report emission.

Every row carries both classes' precision and recall; there is deliberately
no way to drop the nonmember columns.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

from .experiments import ResultsBundle
from .metrics import RATE_FIELDS

log = logging.getLogger(__name__)

REPORT_SCHEMA = "miaudit-report/1"

COLUMNS = ("dataset", "model", "probe", "subset", "class_scope", "learner", "accuracy",
           "balanced_accuracy", "far", "precision_pos", "precision_neg", "recall_pos", "recall_neg",
           "f1_pos", "support_pos", "support_neg", "notes")

SWEEP_COLUMNS = ("ratio", "attack", "precision_pos", "recall_pos", "precision_neg", "recall_neg",
                 "balanced_accuracy", "far", "precision_projected", "support_pos", "support_neg")


def pct(value) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


def _cell_row(bundle: ResultsBundle, cell) -> dict:
    row = {"dataset": bundle.config.get("data", {}).get("kind", "?"),
           "model": bundle.target.get("architecture_id", "?"),
           "probe": cell.probe, "subset": cell.subset, "class_scope": cell.class_scope,
           "learner": cell.learner}
    notes = []
    if cell.report is not None:
        src = cell.report
        rates = {f: src[f] for f in RATE_FIELDS}
        support = (src["support_pos"], src["support_neg"])
    elif cell.aggregate is not None:
        agg = cell.aggregate
        rates = {f: (agg[f]["mean"] if agg[f] else None) for f in RATE_FIELDS}
        support = (agg["support_pos"], agg["support_neg"])
        notes.append(f"mean over {agg['n']} classes")
        notes.append("std " + " ".join(
            f"{f}={100 * agg[f]['std']:.2f}" for f in ("balanced_accuracy", "far") if agg[f]))
    else:
        rates = {f: None for f in RATE_FIELDS}
        support = (None, None)
    if cell.skip_reason:
        notes.append(f"skipped: {cell.skip_reason}")
    if cell.is_best:
        notes.append("best learner")
    row.update(rates)
    row["support_pos"], row["support_neg"] = support
    row["notes"] = "; ".join(notes)
    return row


def rows(bundle: ResultsBundle) -> list[dict]:
    """One raw row (rates as fractions) per attack cell, then the baselines."""
    return [_cell_row(bundle, c) for c in list(bundle.cells) + list(bundle.baselines)]


def format_row(row: dict) -> list[str]:
    out = []
    for col in COLUMNS:
        v = row[col]
        if col in RATE_FIELDS:
            out.append(pct(v))
        elif v is None:
            out.append("-")
        else:
            out.append(str(v))
    return out


def to_csv(bundle: ResultsBundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows(bundle):
        w.writerow(format_row(row))
    return buf.getvalue()


def to_json(bundle: ResultsBundle) -> str:
    return json.dumps({"schema": REPORT_SCHEMA, "columns": list(COLUMNS), "rows": rows(bundle),
                       "bundle": bundle.to_dict()}, indent=1, sort_keys=True)


def from_json(text: str) -> ResultsBundle:
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    return ResultsBundle.from_dict(doc["bundle"])


def emit_report(bundle: ResultsBundle, fmt: str, out_path) -> Path:
    """Write the bundle as ``csv`` or ``json``; warns when cells were skipped or stages failed."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(to_csv(bundle) if fmt == "csv" else to_json(bundle))
    n_skip = sum(1 for c in bundle.cells if c.skip_reason)
    if n_skip or bundle.errors:
        log.warning("partial bundle: %d skipped cells, %d failed stages", n_skip, len(bundle.errors))
    return out_path


def sweep_csv(sweep_rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in sweep_rows:
        w.writerow([_fmt_ratio(r["ratio"]), r["attack"]]
                   + [pct(r[c]) for c in SWEEP_COLUMNS[2:9]]
                   + [r["support_pos"], r["support_neg"]])
    return buf.getvalue()


def _fmt_ratio(r: float) -> str:
    return f"{r:g}:1" if r >= 1 else f"1:{1 / r:g}"
