"""Evaluation metrics for forecasting and classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    rmse: float
    mape: float | None
    r2: float | None
    n: int
    mape_skipped: int = 0

    def to_json(self) -> dict:
        return {
            "rmse": self.rmse,
            "mape": self.mape,
            "r2": self.r2,
            "n": self.n,
            "mape_skipped": self.mape_skipped,
        }


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth) -> tuple[float | None, int]:
    """Mean absolute percentage error.

    Entries with zero truth are excluded (not defined there); the count
    of exclusions is returned alongside.  None when nothing remains.
    """
    pred, truth = np.asarray(pred, float).ravel(), np.asarray(truth, float).ravel()
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    mask = truth != 0
    skipped = int((~mask).sum())
    if not mask.any():
        return None, skipped
    value = float(np.mean(np.abs((pred[mask] - truth[mask]) / truth[mask])))
    return value, skipped


def r2(pred, truth) -> float | None:
    """Coefficient of determination; None when the truth is constant."""
    pred, truth = np.asarray(pred, float).ravel(), np.asarray(truth, float).ravel()
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        return None
    ss_res = float(np.sum((truth - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def compute_metrics(pred, truth, task: str = "forecast") -> dict:
    """Aligned prediction/truth scoring.

    forecast: (n, 4) arrays -> per-channel rmse/mape/r2 plus averages
    (channels where a metric is undefined are left out of the average).
    classify: label sequences -> macro-F1.
    """
    if task == "classify":
        return {"task": "classify", "n": len(list(pred)),
                "macro_f1": macro_f1(pred, truth)}
    if task != "forecast":
        raise ValueError(f"unknown task '{task}'")
    pred = np.atleast_2d(np.asarray(pred, float))
    truth = np.atleast_2d(np.asarray(truth, float))
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    if pred.size == 0:
        raise ValueError("empty input")
    per_channel = []
    for c in range(pred.shape[1]):
        m, skipped = mape(pred[:, c], truth[:, c])
        per_channel.append({
            "rmse": rmse(pred[:, c], truth[:, c]),
            "mape": m, "mape_skipped": skipped,
            "r2": r2(pred[:, c], truth[:, c]),
        })
    def _avg(key):
        vals = [c[key] for c in per_channel if c[key] is not None]
        return float(np.mean(vals)) if vals else None
    return {
        "task": "forecast", "n": int(pred.shape[0]),
        "per_channel": per_channel,
        "rmse": _avg("rmse"), "mape": _avg("mape"), "r2": _avg("r2"),
        "mape_skipped": int(sum(c["mape_skipped"] for c in per_channel)),
    }


def forecast_report(pred, truth) -> MetricReport:
    m, skipped = mape(pred, truth)
    return MetricReport(rmse=rmse(pred, truth), mape=m, r2=r2(pred, truth),
                        n=int(np.asarray(pred).size), mape_skipped=skipped)


def macro_f1(pred_labels, true_labels, labels: list | None = None) -> float:
    """Unweighted mean of per-class F1; classes absent from both the
    predictions and the truth contribute 0 only if explicitly listed."""
    pred_labels, true_labels = list(pred_labels), list(true_labels)
    if len(pred_labels) != len(true_labels):
        raise ValueError("label lists differ in length")
    if not pred_labels:
        raise ValueError("empty input")
    if labels is None:
        labels = sorted(set(pred_labels) | set(true_labels))
    scores = []
    for c in labels:
        tp = sum(1 for p, t in zip(pred_labels, true_labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred_labels, true_labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred_labels, true_labels) if p != c and t == c)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))
