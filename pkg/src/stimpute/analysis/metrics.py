"""Masked reconstruction metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

# MAPE denominator floor; normalised signals touch 0 exactly at their minimum.
MAPE_FLOOR = 1e-8


@dataclass
class MetricReport:
    mae: float
    mse: float
    mre: float  # percent
    mape: float  # percent
    ps_tpr: float | None = None
    std: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def row(self) -> dict:
        out = {k: getattr(self, k) for k in ("mae", "mse", "mre", "mape", "ps_tpr")}
        out.update({f"{k}_std": v for k, v in sorted(self.std.items())})
        out.update({k: v for k, v in sorted(self.meta.items()) if not isinstance(v, (dict, list))})
        return out


def masked_metrics(pred: np.ndarray, truth: np.ndarray, eval_mask: np.ndarray) -> MetricReport:
    """MAE, MSE, MRE (%) and MAPE (%) over entries where ``eval_mask`` is 1.

    MRE = 100 * sum|e| / sum|y|; MAPE = 100 * mean(|e| / max(|y|, 1e-8)).
    Entries outside the mask are never read, so their values are irrelevant.
    """
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    keep = np.asarray(eval_mask) > 0
    if pred.shape != truth.shape or keep.shape != truth.shape:
        raise ValueError("pred, truth and mask must share dims")
    if not keep.any():
        raise ValueError("evaluation mask is empty")
    y = truth[keep]
    e = pred[keep] - y
    ae = np.abs(e)
    ay = np.abs(y)
    denom = ay.sum()
    return MetricReport(
        mae=float(ae.mean()),
        mse=float((e * e).mean()),
        mre=float(100.0 * ae.sum() / denom) if denom > 0 else float("inf"),
        mape=float(100.0 * (ae / np.maximum(ay, MAPE_FLOOR)).mean()),
    )


def summarize(reports: list[MetricReport], meta: dict | None = None) -> MetricReport:
    """Mean and standard deviation of each metric across seeds."""
    keys = ["mae", "mse", "mre", "mape", "ps_tpr"]
    vals = {k: [getattr(r, k) for r in reports if getattr(r, k) is not None] for k in keys}
    mean = {k: (float(np.mean(v)) if v else None) for k, v in vals.items()}
    std = {k: float(np.std(v)) for k, v in vals.items() if v}
    return MetricReport(mean["mae"], mean["mse"], mean["mre"], mean["mape"], mean["ps_tpr"],
                        std=std, meta=dict(meta or {}))


def reports_to_csv(reports: list[MetricReport]) -> str:
    rows = [r.row() for r in reports]
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
