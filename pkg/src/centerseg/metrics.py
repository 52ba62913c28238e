"""Confusion-matrix segmentation metrics: per-class IoU, mIoU, macro F1 and OA."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, DimensionError

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, pred, gt, ignore_index: int = IGNORE_INDEX) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != ignore_index
        self.ignored += int((~keep).sum())
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        k = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
            raise DataError(f"class index outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Scores:
    iou: np.ndarray  # nan where undefined
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    miou: float
    mf1: float
    oa: float


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute(cm: ConfusionMatrix) -> Scores:
    """IoU = TP/(TP+FP+FN); macro means skip classes whose denominator is zero."""
    if cm.total == 0:
        raise ContractError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    iou = _ratio(tp, tp + fp + fn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return Scores(
        iou=iou,
        precision=precision,
        recall=recall,
        f1=f1,
        miou=float(np.nanmean(iou)),
        mf1=float(np.nanmean(f1)),
        oa=float(tp.sum() / c.sum()),
    )


def write_csv(scores: Scores, path, class_names=None) -> None:
    """One row per class (class, IoU, precision, recall, F1) plus a summary row."""
    k = len(scores.iou)
    names = class_names or [str(i) for i in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou", "precision", "recall", "f1"])
        for i in range(k):
            w.writerow([names[i]] + [_fmt(v) for v in (scores.iou[i], scores.precision[i],
                                                       scores.recall[i], scores.f1[i])])
        w.writerow(["summary", f"miou={scores.miou:.6f}", f"oa={scores.oa:.6f}", f"mf1={scores.mf1:.6f}", ""])


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"
