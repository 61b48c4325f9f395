"""Ranking and classification metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive, scores sorted descending.

    Ties keep the original index order. With no positives AP is 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D")
    if scores.size == 0:
        raise DimensionError("average_precision needs at least one element")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    n_pos = int(hits.sum())
    if n_pos == 0:
        return 0.0
    # summed in rank order so results are reproducible bit-for-bit
    ranks = (np.flatnonzero(hits) + 1).tolist()
    return sum(k / r for k, r in enumerate(ranks, start=1)) / n_pos


@dataclass
class MetricsReport:
    accuracy: float
    per_class_ap: list[float]
    loss_curve: list[float] = field(default_factory=list)

    @property
    def map(self) -> float:
        return float(np.mean(self.per_class_ap))


def classification_report(scores: np.ndarray, labels, n_classes: int,
                          loss_curve=None) -> MetricsReport:
    """Accuracy of the argmax plus one-vs-rest AP per class."""
    labels = np.asarray(labels)
    acc = float(np.mean(np.argmax(scores, axis=1) == labels))
    aps = [average_precision(scores[:, c], (labels == c).astype(int)) for c in range(n_classes)]
    return MetricsReport(accuracy=acc, per_class_ap=aps, loss_curve=list(loss_curve or []))
