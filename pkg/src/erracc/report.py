"""Static SVG panels from a metrics CSV: RMSE, spread/skill and error accumulation."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import CSV_FIELDS  # noqa: E402

logger = logging.getLogger(__name__)

PANELS = (
    ("rmse", "(a) ensemble-mean RMSE"),
    ("spread_skill", "(b) spread / skill"),
    ("delta_gaussian", "(c) error accumulation (KL)"),
)
_NUMERIC = ("value", "ci_lo", "ci_hi")


class ReportError(ValueError):
    pass


def _float(text: str, line: int, name: str) -> float:
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ReportError(f"line {line}: {name} is not a number: {text!r}") from None


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics CSV, raising ``ReportError`` with the line number of the first bad row."""
    path = Path(path)
    if not path.exists():
        raise ReportError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        if header != CSV_FIELDS:
            raise ReportError(f"line 1: unexpected header {header}")
        rows = []
        for rec in reader:
            line = reader.line_num
            if not rec:
                continue
            if len(rec) != len(CSV_FIELDS):
                raise ReportError(f"line {line}: expected {len(CSV_FIELDS)} fields, got {len(rec)}")
            row = dict(zip(CSV_FIELDS, rec))
            try:
                row["lead_time"] = int(row["lead_time"])
            except ValueError:
                raise ReportError(f"line {line}: lead_time is not an integer: {row['lead_time']!r}") from None
            for name in _NUMERIC:
                row[name] = _float(row[name], line, name)
            rows.append(row)
    return rows


def _group(rows):
    """``{(system, variable): {metric: {model: [(t, value, lo, hi), ...]}}}``"""
    out = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for r in rows:
        out[(r["system"], r["variable"])][r["metric"]][r["model"]].append((r["lead_time"], r["value"], r["ci_lo"], r["ci_hi"]))
    return out


def render(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Write one three-panel SVG per (system, variable); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    groups = _group(rows)
    with plt.rc_context({"svg.hashsalt": "erracc", "svg.fonttype": "none", "path.simplify": False}):
        for (system, variable), by_metric in sorted(groups.items()):
            fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
            for ax, (metric, title) in zip(axes, PANELS):
                models = by_metric.get(metric, {})
                for model in sorted(models):
                    pts = sorted(models[model])
                    t = [p[0] for p in pts]
                    ax.plot(t, [p[1] for p in pts], label=model, lw=1.2)
                    lo = [p[2] for p in pts]
                    hi = [p[3] for p in pts]
                    if not all(math.isnan(v) for v in lo):
                        ax.fill_between(t, lo, hi, alpha=0.25, lw=0)
                if metric == "spread_skill":
                    ax.axhline(1.0, color="k", lw=0.6, ls="--")
                ax.set_title(title)
                ax.set_xlabel("lead time")
                if models:
                    ax.legend(fontsize=7)
            fig.suptitle(f"{system}: {variable}")
            fig.tight_layout()
            path = out_dir / f"{system}_{variable}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            plt.close(fig)
            written.append(path)
    return written


def report(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    rows = read_metrics(csv_path)
    if not rows:
        logger.warning("%s has no metric rows; nothing to plot", csv_path)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        return []
    return render(rows, out_dir)
