"""Training losses and segmentation metrics."""
from __future__ import annotations

import io
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import (
    DiffArray,
    absolute,
    add,
    as_array,
    log_softmax,
    multiply,
    reduce,
    subtract,
)


def class_weights(labels, class_count: int) -> np.ndarray:
    """``N / (n_c + 0.02 N)`` from training labels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("cannot derive class weights from an empty label set")
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    total = float(labels.size)
    return total / (counts + 0.02 * total)


def weighted_cross_entropy(logits, labels, weights) -> DiffArray:
    """Mean over points of ``w[y] * -log softmax(logits)[y]``."""
    logits = as_array(logits)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if weights.shape != (c,):
        raise DimensionError(f"need {c} class weights, got {weights.shape}")
    coef = np.zeros((n, c))
    coef[np.arange(n), labels] = -weights[labels] / n
    return reduce(multiply(log_softmax(logits, axis=-1), coef), None, "sum")


def constraint_loss(f_centroid, f_nbr, weights, local_encoding) -> DiffArray:
    """L1 distance between each centroid and its weight-shifted neighbors.

    Per point: ``|| f_i - sum_k (f_i^k + W_i^k * dl_i^k) ||_1``, averaged over
    points and channels.
    """
    f_centroid, f_nbr = as_array(f_centroid), as_array(f_nbr)
    weights, local_encoding = as_array(weights), as_array(local_encoding)
    n, c = f_centroid.shape
    if f_nbr.ndim != 3 or f_nbr.shape[0] != n or f_nbr.shape[2] != c \
            or weights.shape != f_nbr.shape or local_encoding.shape != f_nbr.shape:
        raise DimensionError(f"constraint shapes differ: centroid {f_centroid.shape}, neighbors {f_nbr.shape}, "
                             f"weights {weights.shape}, encoding {local_encoding.shape}")
    shifted = reduce(add(f_nbr, multiply(weights, local_encoding)), 1, "sum")
    return reduce(absolute(subtract(f_centroid, shifted)), None, "mean")


def aggregation_loss(wce, per_level_constraints: Sequence) -> DiffArray:
    """``wce + mean(per-level constraint losses)``."""
    if len(per_level_constraints) == 0:
        raise ValidationError("aggregation loss needs at least one encoding-layer constraint")
    total = per_level_constraints[0]
    for term in per_level_constraints[1:]:
        total = add(total, term)
    return add(wce, multiply(total, 1.0 / len(per_level_constraints)))


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns predictions."""

    def __init__(self, class_count: int, counts: Optional[np.ndarray] = None):
        self.class_count = class_count
        self.counts = np.zeros((class_count, class_count), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()

    def accumulate(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        c = self.class_count
        if truth.shape != pred.shape:
            raise DimensionError(f"truth {truth.shape} and prediction {pred.shape} differ")
        for name, arr in (("truth", truth), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ValidationError(f"{name} labels must lie in [0, {c})")
        self.counts += np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise DimensionError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.class_count, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require(self):
        if self.total == 0:
            raise ValidationError("confusion matrix is empty")

    def iou_per_class(self) -> np.ndarray:
        """TP / (TP + FP + FN); NaN where a class is absent from truth and prediction."""
        self._require()
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)

    def miou(self, absent: str = "exclude") -> float:
        iou = self.iou_per_class()
        if absent == "zero":
            return float(np.nan_to_num(iou, nan=0.0).mean())
        if absent != "exclude":
            raise ValidationError("absent must be 'exclude' or 'zero'")
        return float(np.nanmean(iou))

    def oa(self) -> float:
        self._require()
        return float(np.trace(self.counts) / self.total)


def accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    return cm.accumulate(truth, pred)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    return cm.iou_per_class()


def miou(cm: ConfusionMatrix, absent: str = "exclude") -> float:
    return cm.miou(absent)


def oa(cm: ConfusionMatrix) -> float:
    return cm.oa()


def _names(cm, class_names):
    if class_names is None:
        return [f"class_{i}" for i in range(cm.class_count)]
    if len(class_names) != cm.class_count:
        raise ValidationError("one name per class required")
    return list(class_names)


def format_report(cm: ConfusionMatrix, class_names=None) -> str:
    """Single-row table: OA, mIoU, then per-class IoU, all in percent."""
    names = _names(cm, class_names)
    iou = cm.iou_per_class()
    head = ["OA(%)", "mIoU(%)"] + names
    vals = [f"{100 * cm.oa():.1f}", f"{100 * cm.miou():.1f}"] + \
        ["-" if np.isnan(v) else f"{100 * v:.1f}" for v in iou]
    widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(head, widths))
    line2 = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return f"{line1}\n{line2}\n"


def report_csv(cm: ConfusionMatrix, class_names=None) -> str:
    """``class,iou`` rows followed by ``mIoU`` and ``OA`` rows, fractions."""
    names = _names(cm, class_names)
    out = io.StringIO()
    out.write("class,iou\n")
    for name, v in zip(names, cm.iou_per_class()):
        out.write(f"{name},{'' if np.isnan(v) else repr(float(v))}\n")
    out.write(f"mIoU,{cm.miou()!r}\n")
    out.write(f"OA,{cm.oa()!r}\n")
    return out.getvalue()
