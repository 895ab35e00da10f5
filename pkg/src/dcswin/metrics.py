"""Confusion-matrix evaluation: overall accuracy, IoU, precision/recall/F1."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels with true class t predicted as p."""

    num_classes: int
    class_names: list = None
    ignore_label: int | None = None
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        if self.class_names is None:
            self.class_names = [f"class_{k}" for k in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ValueError("need one class name per class")

    def accumulate(self, y_true, y_pred):
        y_true = np.asarray(y_true).reshape(-1)
        y_pred = np.asarray(y_pred).reshape(-1)
        if y_true.shape != y_pred.shape:
            raise ValueError(f"label maps differ in size: {y_true.size} vs {y_pred.size}")
        if self.ignore_label is not None:
            keep = y_true != self.ignore_label
            y_true, y_pred = y_true[keep], y_pred[keep]
        K = self.num_classes
        for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= K):
                raise ValueError(f"{name} has labels outside [0, {K})")
        flat = y_true.astype(np.int64) * K + y_pred.astype(np.int64)
        self.counts += np.bincount(flat, minlength=K * K).reshape(K, K)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, list(self.class_names), self.ignore_label,
                               self.counts + other.counts)

    __add__ = merge

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def tp(self):
        return np.diag(self.counts).astype(np.int64)

    @property
    def fp(self):
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self):
        return self.total - self.tp - self.fp - self.fn


def _safe_ratio(num, den, what):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    if not ok.all() and what:
        warnings.warn(f"{what}: 0/0 for classes {np.flatnonzero(~ok).tolist()}, set to 0",
                      RuntimeWarning, stacklevel=3)
    return out


def overall_accuracy(cm):
    """Correct pixels over all evaluated pixels (trace / total)."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    return float(cm.tp.sum() / cm.total)


def per_class_iou(cm):
    """IoU per class; NaN where the class is absent from both truth and prediction."""
    den = cm.tp + cm.fp + cm.fn
    out = np.full(cm.num_classes, np.nan)
    ok = den > 0
    out[ok] = cm.tp[ok] / den[ok]
    return out


def mean_iou(cm):
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    return float(np.nanmean(per_class_iou(cm)))


@dataclass
class F1Scores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    mean_precision: float
    mean_recall: float
    mean_f1: float


def f1_scores(cm):
    """Per-class precision, recall and F1 and their unweighted class means.

    Undefined ratios (0/0) are reported as 0 with a RuntimeWarning.
    """
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    precision = _safe_ratio(tp, tp + fp, "precision")
    recall = _safe_ratio(tp, tp + fn, "recall")
    f1 = _safe_ratio(2 * tp, 2 * tp + fp + fn, None)
    return F1Scores(precision, recall, f1, float(precision.mean()),
                    float(recall.mean()), float(f1.mean()))


def report_rows(cm):
    """(name, value) pairs in table column order: per-class F1, Mean F1, OA, mIoU."""
    scores = f1_scores(cm)
    rows = [(f"F1_{name}", float(v)) for name, v in zip(cm.class_names, scores.f1)]
    rows += [("mean_f1", scores.mean_f1), ("oa", overall_accuracy(cm)), ("miou", mean_iou(cm))]
    return rows


def format_tsv(cm):
    return "".join(f"{name}\t{value:.4f}\n" for name, value in report_rows(cm))


def format_table(cm, title=None):
    rows = report_rows(cm)
    headers = [name for name, _ in rows]
    cells = [f"{100 * v:.2f}" for _, v in rows]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.rjust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def pixel_accuracy(y_true, y_pred, ignore_label=None):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    keep = np.ones(y_true.shape, bool) if ignore_label is None else y_true != ignore_label
    return float((y_true[keep] == y_pred[keep]).mean())
