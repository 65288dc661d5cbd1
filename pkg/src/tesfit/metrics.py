"""Evaluation metrics and the two-sample significance test."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

# Two-sided 95% critical values of Student's t, df 1..30, then sparse
# anchors; lookups above 30 take the largest tabulated df <= the request.
_T_CRIT_95 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571,
    6: 2.447, 7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228,
    11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145, 15: 2.131,
    16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086,
    21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060,
    26: 2.056, 27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
    40: 2.021, 60: 2.000, 120: 1.980,
}
_T_CRIT_INF = 1.960


@dataclass
class EvalResult:
    """Classification metrics over one evaluation pass."""

    top1: float
    mean_per_class: float
    confusion: np.ndarray
    n_eval: int


def evaluate(preds: np.ndarray, truth: np.ndarray, n_classes: int) -> EvalResult:
    """Top-1 accuracy, mean per-class accuracy, and the confusion matrix.

    Classes absent from the evaluation set are excluded from the
    per-class mean rather than treated as zero.
    """
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if preds.size != truth.size:
        raise ShapeError(f"{preds.size} predictions for {truth.size} labels")
    if preds.size and max(preds.max(), truth.max()) >= n_classes:
        raise ShapeError(f"label >= class count {n_classes}")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    top1 = float((preds == truth).mean()) if preds.size else 0.0
    row_totals = confusion.sum(axis=1)
    present = row_totals > 0
    per_class = np.diag(confusion)[present] / row_totals[present]
    mean_per_class = float(per_class.mean()) if present.any() else 0.0
    return EvalResult(top1=top1, mean_per_class=mean_per_class,
                      confusion=confusion, n_eval=int(preds.size))


def write_confusion_csv(path, result: EvalResult, class_names: list[str]) -> None:
    """Confusion matrix as CSV with class-name header row and column."""
    if len(class_names) != result.confusion.shape[0]:
        raise ShapeError("class-name count does not match the confusion matrix")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, result.confusion):
            writer.writerow([name] + [int(v) for v in row])


def t_critical(df: int) -> float:
    """Two-sided 95% critical value from the embedded table."""
    if df < 1:
        raise ParameterError(f"degrees of freedom must be >= 1, got {df}")
    if df in _T_CRIT_95:
        return _T_CRIT_95[df]
    below = [k for k in _T_CRIT_95 if k <= df]
    return _T_CRIT_95[max(below)] if below else _T_CRIT_INF


def t_test(sample_a, sample_b, alpha: float = 0.05) -> tuple[float, bool]:
    """Pooled-variance two-sample Student's t-test, two-sided.

    Only the 95% level is supported; the critical values are embedded so
    results do not depend on an external stats library.
    """
    if alpha != 0.05:
        raise ParameterError("only alpha=0.05 is supported (embedded 95% table)")
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ParameterError("both samples need at least 2 points")
    df = a.size + b.size - 2
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / df
    diff = float(a.mean() - b.mean())
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0, False
        return math.copysign(math.inf, diff), True
    t = diff / math.sqrt(pooled * (1.0 / a.size + 1.0 / b.size))
    return float(t), bool(abs(t) > t_critical(df))


def triple_from_mean_std(mean: float, std: float) -> np.ndarray:
    """Three points (m-s, m, m+s): sample mean m and sample std s exactly."""
    return np.array([mean - std, mean, mean + std], dtype=np.float64)
