"""Confusion counting and per-class accuracy reporting.

The headline metric is per-class accuracy: true positives of a class
divided by the total number of pixels of that class. Change accuracy is
therefore identical to recall. Multi-region evaluation pools confusion
counts before computing rates (per-region reports are also emitted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp_change: int
    fn_change: int
    tn_no_change: int
    fp_no_change: int

    @property
    def total(self) -> int:
        return self.tp_change + self.fn_change + self.tn_no_change + self.fp_no_change

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp_change + other.tp_change,
                         self.fn_change + other.fn_change,
                         self.tn_no_change + other.tn_no_change,
                         self.fp_no_change + other.fp_no_change)


@dataclass(frozen=True)
class EvalReport:
    """Rates in percent; a field is None when its class has no pixels."""

    overall_accuracy: float | None
    change_accuracy: float | None
    no_change_accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "change_accuracy": self.change_accuracy,
            "no_change_accuracy": self.no_change_accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def confusion(pred: np.ndarray, gt: np.ndarray) -> Confusion:
    """Exact pixel counts of a binary prediction against binary ground truth."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match "
                         f"ground truth {gt.shape}")
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    return Confusion(
        tp_change=int(np.count_nonzero(p & g)),
        fn_change=int(np.count_nonzero(~p & g)),
        tn_no_change=int(np.count_nonzero(~p & ~g)),
        fp_no_change=int(np.count_nonzero(p & ~g)),
    )


def report(conf: Confusion) -> EvalReport:
    """Per-class accuracies, overall accuracy, precision/recall/F1 in percent."""
    n_change = conf.tp_change + conf.fn_change
    n_no_change = conf.tn_no_change + conf.fp_no_change
    n_pred_change = conf.tp_change + conf.fp_no_change
    change_acc = 100.0 * conf.tp_change / n_change if n_change else None
    no_change_acc = 100.0 * conf.tn_no_change / n_no_change if n_no_change else None
    overall = (100.0 * (conf.tp_change + conf.tn_no_change) / conf.total
               if conf.total else None)
    precision = 100.0 * conf.tp_change / n_pred_change if n_pred_change else None
    recall = change_acc
    if precision and recall and precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return EvalReport(overall_accuracy=overall, change_accuracy=change_acc,
                      no_change_accuracy=no_change_acc, precision=precision,
                      recall=recall, f1=f1)


def pooled_confusion(confusions: list[Confusion]) -> Confusion:
    if not confusions:
        raise ValueError("nothing to pool")
    total = confusions[0]
    for c in confusions[1:]:
        total = total + c
    return total


def mean_per_class_accuracy(rep: EvalReport) -> float:
    """Mean of change and no-change accuracy (percent); both must be defined."""
    if rep.change_accuracy is None or rep.no_change_accuracy is None:
        raise ValueError("mean per-class accuracy undefined: a class has no pixels")
    return 0.5 * (rep.change_accuracy + rep.no_change_accuracy)


def format_report(rep: EvalReport) -> str:
    """Two-decimal rendering of the headline columns."""
    def fmt(v):
        return "   n/a" if v is None else f"{v:6.2f}"
    return (f"acc {fmt(rep.overall_accuracy)}  change {fmt(rep.change_accuracy)}  "
            f"no-change {fmt(rep.no_change_accuracy)}")
