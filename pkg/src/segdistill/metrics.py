"""Confusion-matrix accuracy metrics and evaluation reports."""

from __future__ import annotations

import csv

import numpy as np

from .errors import DataError, DimensionError
from .losses import VOID_LABEL


class ConfusionMatrix:
    """Accumulates prediction counts; rows are ground truth, columns predictions.

    Pixels whose ground truth is void are excluded entirely.
    """

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise DimensionError("ConfusionMatrix needs at least 2 classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, predicted, truth, void: int = VOID_LABEL) -> None:
        predicted = np.asarray(predicted).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if predicted.shape != truth.shape:
            raise DimensionError("update: predicted and truth sizes differ")
        keep = truth != void
        predicted, truth = predicted[keep], truth[keep]
        if truth.size == 0:
            return
        if truth.max() >= self.num_classes or predicted.max() >= self.num_classes:
            raise DataError("update: label id outside the class space")
        flat = truth.astype(np.int64) * self.num_classes + predicted
        self.counts += np.bincount(
            flat, minlength=self.num_classes ** 2).reshape(self.counts.shape)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.num_classes != self.num_classes:
            raise DimensionError("merge: class counts differ")
        self.counts += other.counts

    def class_recalls(self) -> np.ndarray:
        """Per-class recall in percent; NaN for classes absent from the truth."""
        support = self.counts.sum(axis=1)
        recalls = np.full(self.num_classes, np.nan)
        present = support > 0
        recalls[present] = (np.diag(self.counts)[present] / support[present]) * 100.0
        return recalls

    def per_class_accuracy(self) -> float:
        """Mean of per-class recall percentages over classes present in the truth."""
        recalls = self.class_recalls()
        present = ~np.isnan(recalls)
        if not present.any():
            raise DataError("per_class_accuracy: confusion matrix is empty")
        return float(recalls[present].sum() / present.sum())

    def global_accuracy(self) -> float:
        """Correct pixels over all counted pixels, in percent."""
        total = self.counts.sum()
        if total == 0:
            raise DataError("global_accuracy: confusion matrix is empty")
        return float(np.diag(self.counts).sum() / total * 100.0)


def metrics(cm: ConfusionMatrix) -> dict:
    return {"per_class": cm.per_class_accuracy(), "global": cm.global_accuracy()}


def write_eval_report(path, class_names, rows) -> None:
    """Write an accuracy table; one row per evaluated model/run.

    ``rows`` is a list of (name, ConfusionMatrix).  Columns follow the
    palette order, then the two summary metrics.
    """
    class_names = list(class_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["name"] + class_names + ["per_class", "global"])
        for name, cm in rows:
            if len(class_names) != cm.num_classes:
                raise DimensionError("write_eval_report: class name count "
                                     "does not match the matrix")
            recalls = ["" if np.isnan(r) else f"{r:.2f}" for r in cm.class_recalls()]
            out.writerow([name] + recalls +
                         [f"{cm.per_class_accuracy():.2f}",
                          f"{cm.global_accuracy():.2f}"])
