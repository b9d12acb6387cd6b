"""Confusion-matrix based classification and segmentation metrics."""

from __future__ import annotations

import math

import numpy as np

FLOODNET_CLASSES = (
    "Background", "Building Flooded", "Building Non-Flooded", "Road Flooded",
    "Road Non-Flooded", "Water", "Tree", "Vehicle", "Pool", "Grass",
)


def class_names(n_classes: int) -> list[str]:
    if n_classes == len(FLOODNET_CLASSES):
        return list(FLOODNET_CLASSES)
    return [f"class_{i}" for i in range(n_classes)]


class ConfusionMatrix:
    """counts[true, predicted]."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, truth) -> ConfusionMatrix:
        pred = np.asarray(pred, dtype=np.int64).ravel()
        truth = np.asarray(truth, dtype=np.int64).ravel()
        if pred.shape != truth.shape:
            raise ValueError(f"pred/truth length mismatch {pred.size} vs {truth.size}")
        n = self.n_classes
        for name, arr in (("pred", pred), ("truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} contains classes outside [0, {n})")
        self.counts += np.bincount(truth * n + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge matrices with different class counts")
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"


def confusion(pred, truth, n_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(n_classes).update(pred, truth)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def classification_metrics(cm: ConfusionMatrix, positive_class: int = 1) -> dict:
    """Accuracy, precision, recall and F1 for ``positive_class``.

    Zero-denominator ratios come back as 0 and are listed under ``undefined``.
    """
    c = cm.counts
    tp = c[positive_class, positive_class]
    fp = c[:, positive_class].sum() - tp
    fn = c[positive_class, :].sum() - tp
    undefined = []
    accuracy, bad = _ratio(np.trace(c), c.sum())
    if bad:
        undefined.append("accuracy")
    precision, bad = _ratio(tp, tp + fp)
    if bad:
        undefined.append("precision")
    recall, bad = _ratio(tp, tp + fn)
    if bad:
        undefined.append("recall")
    f1, bad = _ratio(2 * precision * recall, precision + recall)
    if bad:
        undefined.append("f1")
    return {"accuracy": float(accuracy), "precision": float(precision),
            "recall": float(recall), "f1": float(f1), "undefined": undefined}


def segmentation_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class IoU and their unweighted mean over every class.

    A class that is absent from both prediction and truth gets IoU 0 and is
    listed in ``empty_classes``; it still counts toward the mean.
    """
    c = cm.counts
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    ious = []
    empty = []
    for k in range(cm.n_classes):
        v, bad = _ratio(inter[k], union[k])
        ious.append(float(v))
        if bad:
            empty.append(k)
    # fsum keeps the mean independent of class order
    miou = math.fsum(ious) / len(ious)
    accuracy, _ = _ratio(np.trace(c), c.sum())
    return {"per_class_iou": ious, "miou": miou, "pixel_accuracy": float(accuracy),
            "empty_classes": empty}
