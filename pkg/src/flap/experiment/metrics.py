"""Metrics CSV files: the source of truth for every reported number and plot."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

METRIC_FIELDS = (
    "epoch", "seed", "method", "success_rate", "value_loss", "q_loss", "policy_loss", "mean_kl", "plan_cost",
)


class MetricsParseError(ValueError):
    """Malformed metrics file; the message names the offending line."""


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_metrics(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_FIELDS:
            raise MetricsParseError(f"{path}:1: expected header {','.join(METRIC_FIELDS)}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRIC_FIELDS):
                raise MetricsParseError(f"{path}:{lineno}: expected {len(METRIC_FIELDS)} fields, got {len(rec)}")
            try:
                row = {"epoch": int(rec[0]), "seed": int(rec[1]), "method": rec[2]}
                row.update({k: float(v) for k, v in zip(METRIC_FIELDS[3:], rec[3:])})
            except ValueError as exc:
                raise MetricsParseError(f"{path}:{lineno}: {exc}") from exc
            rows.append(row)
    return rows


def success_curves(rows: list[dict]) -> dict[str, dict[str, np.ndarray]]:
    """Per method: epochs, mean success and sample std (ddof=1; zero for a single seed)."""
    by = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by[r["method"]][r["epoch"]].append(r["success_rate"])
    out = {}
    for method, per_epoch in by.items():
        epochs = np.array(sorted(per_epoch))
        vals = [np.asarray(per_epoch[e], dtype=float) for e in epochs]
        mean = np.array([v.mean() for v in vals])
        std = np.array([v.std(ddof=1) if len(v) > 1 else 0.0 for v in vals])
        out[method] = {"epoch": epochs, "mean": mean, "std": std, "n": np.array([len(v) for v in vals])}
    return out


def final_success(rows: list[dict], method: str | None = None) -> tuple[float, float]:
    """Mean and sample std over seeds of the success rate at the last epoch."""
    sel = [r for r in rows if method is None or r["method"] == method]
    if not sel:
        return float("nan"), float("nan")
    last = max(r["epoch"] for r in sel)
    vals = np.array([r["success_rate"] for r in sel if r["epoch"] == last])
    return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
