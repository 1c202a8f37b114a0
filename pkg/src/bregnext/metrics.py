"""Evaluation metrics for categorical and dimensional affect predictions.

Dimensional metrics (RMSE, Pearson CC, concordance CCC, sign agreement)
use population (1/n) variances throughout.  Degenerate series with zero
variance raise DegenerateSeriesError instead of returning NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateSeriesError(ValueError):
    """A correlation was requested on a zero-variance series."""


@dataclass
class MetricSeries:
    predictions: np.ndarray
    ground_truth: np.ndarray
    dimension_tag: str = "valence"  # "valence" | "arousal" | "class"

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        if self.predictions.shape != self.ground_truth.shape:
            raise ValueError("prediction/ground-truth lengths differ")
        if self.predictions.size == 0:
            raise ValueError("empty metric series")


def _series(s, gt=None) -> MetricSeries:
    """Accept a MetricSeries or a raw (predictions, ground-truth) pair."""
    if isinstance(s, MetricSeries):
        return s
    return MetricSeries(s, gt)


def rmse(s, gt=None) -> float:
    s = _series(s, gt)
    d = s.predictions - s.ground_truth
    return float(np.sqrt(np.mean(d * d)))


def cc(s, gt=None) -> float:
    """Pearson correlation coefficient."""
    s = _series(s, gt)
    p, g = s.predictions, s.ground_truth
    sp, sg = np.std(p), np.std(g)
    if sp == 0.0 or sg == 0.0:
        raise DegenerateSeriesError(
            "correlation undefined for a zero-variance series")
    cov = np.mean((p - p.mean()) * (g - g.mean()))
    return float(cov / (sp * sg))


def ccc(s, gt=None) -> float:
    """Concordance correlation: Pearson attenuated by scale and mean gaps."""
    s = _series(s, gt)
    p, g = s.predictions, s.ground_truth
    rho = cc(s)
    vp, vg = np.var(p), np.var(g)
    return float(2.0 * rho * np.sqrt(vp) * np.sqrt(vg)
                 / (vp + vg + (p.mean() - g.mean()) ** 2))


def sagr(s, gt=None) -> float:
    """Fraction of samples whose prediction and ground truth share a sign.
    sign(0) is its own value and only agrees with another exact zero."""
    s = _series(s, gt)
    return float(np.mean(np.sign(s.predictions) == np.sign(s.ground_truth)))


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # [true, predicted] counts
    degenerate_classes: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())


def class_report(pred, gt, num_classes: int) -> ClassReport:
    """One-vs-rest precision/recall/F1 per class plus the confusion matrix.
    Classes absent from the ground truth are flagged degenerate and score 0.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("prediction/ground-truth index lists must match")
    if pred.size == 0:
        raise ValueError("empty metric series")
    for arr, what in ((pred, "prediction"), (gt, "ground-truth")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise IndexError(f"{what} class index outside [0, {num_classes})")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (gt, pred), 1)

    tp = np.diag(confusion).astype(np.float64)
    pred_counts = confusion.sum(axis=0).astype(np.float64)
    gt_counts = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_counts > 0, tp / pred_counts, 0.0)
        recall = np.where(gt_counts > 0, tp / gt_counts, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    degenerate = [k for k in range(num_classes) if gt_counts[k] == 0]
    return ClassReport(
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=confusion,
        degenerate_classes=degenerate,
    )


def error_histogram(s, gt=None, bins: int = 40,
                    lo: float = -2.0, hi: float = 2.0):
    """Histogram of (prediction - ground truth) over uniform bins on
    [lo, hi].  Returns (bin centers, counts)."""
    s = _series(s, gt)
    errors = s.predictions - s.ground_truth
    counts, edges = np.histogram(errors, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, counts


def dimensional_report(pred, gt) -> dict:
    """The four headline metrics for each of valence and arousal, from
    (N, 2) prediction/ground-truth arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError("dimensional report needs matching (N, 2) arrays")
    out = {}
    for j, dim in enumerate(("valence", "arousal")):
        s = MetricSeries(pred[:, j], gt[:, j], dim)
        out[f"rmse_{dim}"] = rmse(s)
        out[f"cc_{dim}"] = cc(s)
        out[f"ccc_{dim}"] = ccc(s)
        out[f"sagr_{dim}"] = sagr(s)
    both = MetricSeries(pred.reshape(-1), gt.reshape(-1), "valence")
    out["rmse_total"] = rmse(both)
    return out
