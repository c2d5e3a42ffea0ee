"""Segmentation and classification metrics built on a shared confusion matrix.

Every ratio metric treats a class whose denominator is zero as undefined:
it is reported as NaN in per-class arrays and left out of the macro mean.
A scalar metric with no defined classes is NaN.

Classification reuses the same machinery with one "pixel" per sample.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ValidationError

IGNORE_LABEL = 255


@dataclass
class LabelMap:
    labels: np.ndarray
    num_classes: int
    ignore_value: int = IGNORE_LABEL

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValidationError(f"label map must be 2-D, got shape {self.labels.shape}")
        valid = (self.labels >= 0) & (self.labels < self.num_classes)
        valid |= self.labels == self.ignore_value
        if not valid.all():
            bad = np.unique(self.labels[~valid])
            raise ValidationError(
                f"label values {bad.tolist()} outside [0, {self.num_classes - 1}] "
                f"and not the ignore value {self.ignore_value}"
            )

    @property
    def shape(self):
        return self.labels.shape


def _as_labels(x):
    if isinstance(x, LabelMap):
        return x.labels
    return np.asarray(x, dtype=np.int64)


class ConfusionMatrix:
    """K x K count matrix, rows = ground truth and columns = prediction."""

    def __init__(self, num_classes, ignore_value=IGNORE_LABEL):
        if num_classes < 1:
            raise ValidationError("num_classes must be positive")
        self.num_classes = int(num_classes)
        self.ignore_value = int(ignore_value)
        self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.ignored_pixels = 0

    @classmethod
    def from_counts(cls, counts, ignored_pixels=0, ignore_value=IGNORE_LABEL):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValidationError(f"counts must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValidationError("counts must be non-negative")
        cm = cls(counts.shape[0], ignore_value)
        cm.counts = counts.copy()
        cm.ignored_pixels = int(ignored_pixels)
        return cm

    @property
    def total(self):
        return int(self.counts.sum()) + self.ignored_pixels

    def update(self, pred, truth):
        """Add one prediction/truth pair. Ignore pixels in ``truth`` are skipped."""
        for m in (pred, truth):
            if isinstance(m, LabelMap) and m.num_classes != self.num_classes:
                raise ValidationError(
                    f"label map has K={m.num_classes}, confusion matrix has K={self.num_classes}"
                )
        p = _as_labels(pred)
        t = _as_labels(truth)
        if p.shape != t.shape:
            raise ValidationError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
        try:
            counts, ignored = kernels.confusion_counts(t, p, self.num_classes, self.ignore_value)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        self.counts += counts
        self.ignored_pixels += int(ignored)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge confusion matrices with different K")
        out = ConfusionMatrix(self.num_classes, self.ignore_value)
        out.counts = self.counts + other.counts
        out.ignored_pixels = self.ignored_pixels + other.ignored_pixels
        return out

    __add__ = merge

    def copy(self):
        return ConfusionMatrix.from_counts(self.counts, self.ignored_pixels, self.ignore_value)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.ignored_pixels == other.ignored_pixels
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self):
        return f"ConfusionMatrix(K={self.num_classes}, total={self.total}, ignored={self.ignored_pixels})"


def accumulate(cm, pred, truth):
    """Tally ``pred`` against ``truth`` into ``cm`` and return it."""
    return cm.update(pred, truth)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def _nanmean(values):
    values = np.asarray(values, dtype=np.float64)
    defined = values[~np.isnan(values)]
    if defined.size == 0:
        return math.nan
    return float(defined.mean())


def _tallies(cm):
    c = cm.counts
    tp = np.diag(c)
    return tp, c.sum(axis=1), c.sum(axis=0)


def iou_per_class(cm):
    tp, rows, cols = _tallies(cm)
    return _ratio(tp, rows + cols - tp)


def miou(cm):
    return _nanmean(iou_per_class(cm))


def dice_per_class(cm):
    tp, rows, cols = _tallies(cm)
    fp = cols - tp
    fn = rows - tp
    return _ratio(2 * tp, 2 * tp + fp + fn)


def dice_f1(cm):
    """Macro Dice/F1, 2TP / (2TP + FP + FN) averaged over defined classes."""
    return _nanmean(dice_per_class(cm))


def pixel_accuracy(cm):
    total = int(cm.counts.sum())
    if total == 0:
        return math.nan
    return float(np.trace(cm.counts)) / total


def class_accuracy(cm):
    tp, rows, _ = _tallies(cm)
    return _ratio(tp, rows)


def mean_class_accuracy(cm):
    return _nanmean(class_accuracy(cm))


def precision_per_class(cm):
    tp, _, cols = _tallies(cm)
    return _ratio(tp, cols)


def macro_precision(cm):
    return _nanmean(precision_per_class(cm))


def macro_recall(cm):
    return mean_class_accuracy(cm)


def ce_loss(probs, target, atol=1e-5):
    """Mean of -ln p[target] over non-ignore pixels.

    ``probs`` is H x W x K. Returns NaN when every pixel is ignored.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = _as_labels(target)
    ignore_value = target.ignore_value if isinstance(target, LabelMap) else IGNORE_LABEL
    if probs.ndim != 3 or probs.shape[:2] != labels.shape:
        raise ValidationError(
            f"shape mismatch: probabilities {probs.shape} vs target {labels.shape}"
        )
    if np.abs(probs.sum(axis=-1) - 1.0).max() > atol:
        raise ValidationError("probabilities must sum to 1 per pixel")
    keep = labels != ignore_value
    if not keep.any():
        return math.nan
    picked = probs[keep, labels[keep]]
    with np.errstate(divide="ignore"):
        return float(-np.log(picked).mean())


def lost_classes(baseline_preds, adv_preds):
    """Classes predicted somewhere in the baseline batch but nowhere under attack."""
    baseline_preds = list(baseline_preds)
    adv_preds = list(adv_preds)
    if len(baseline_preds) != len(adv_preds):
        raise ValidationError(
            f"image sets differ: {len(baseline_preds)} baseline vs {len(adv_preds)} adversarial"
        )
    base, adv = set(), set()
    for i, (b, a) in enumerate(zip(baseline_preds, adv_preds)):
        b, a = _as_labels(b), _as_labels(a)
        if b.shape != a.shape:
            raise ValidationError(f"image {i}: baseline shape {b.shape} vs adversarial {a.shape}")
        base.update(np.unique(b).tolist())
        adv.update(np.unique(a).tolist())
    return base - adv


def mean_image_iou(per_image):
    """Average of per-image mIoU, skipping images where mIoU is undefined."""
    return _nanmean([miou(cm) for cm in per_image])


@dataclass
class MetricBundle:
    pixel_acc: float
    per_class_iou: np.ndarray
    miou: float
    miou_agg: float
    macc: float
    dice_f1: float
    lost_classes: set = field(default_factory=set)

    @property
    def undefined_classes(self):
        return [int(c) for c in np.flatnonzero(np.isnan(self.per_class_iou))]

    @classmethod
    def from_confusion(cls, aggregate, per_image=None, lost=()):
        """Build from the aggregate matrix; ``per_image`` feeds the image-mean mIoU."""
        agg_miou = miou(aggregate)
        return cls(
            pixel_acc=pixel_accuracy(aggregate),
            per_class_iou=iou_per_class(aggregate),
            miou=mean_image_iou(per_image) if per_image is not None else agg_miou,
            miou_agg=agg_miou,
            macc=mean_class_accuracy(aggregate),
            dice_f1=dice_f1(aggregate),
            lost_classes=set(lost),
        )

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "pixel_acc": clean(self.pixel_acc),
            "per_class_iou": [clean(float(v)) for v in self.per_class_iou],
            "miou": clean(self.miou),
            "miou_agg": clean(self.miou_agg),
            "macc": clean(self.macc),
            "dice_f1": clean(self.dice_f1),
            "lost_classes": sorted(int(c) for c in self.lost_classes),
            "undefined_classes": self.undefined_classes,
        }


PER_CLASS_HEADER = ["class_id", "iou", "dice", "accuracy", "support"]


def write_per_class_csv(cm, path):
    iou = iou_per_class(cm)
    dice = dice_per_class(cm)
    acc = class_accuracy(cm)
    support = cm.counts.sum(axis=1)
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PER_CLASS_HEADER)
        for c in range(cm.num_classes):
            w.writerow([c, _fmt(iou[c]), _fmt(dice[c]), _fmt(acc[c]), int(support[c])])


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))
