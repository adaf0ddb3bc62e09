"""Benchmark metrics: accuracy, AUC-ROC, Spearman rho, sequence identity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from plm_kit.errors import ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class MetricResult:
    name: str
    value: float
    support: int

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "support": self.support}


def _vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise UndefinedMetricError(f"{name}: empty input")
    if not np.all(np.isfinite(arr)):
        raise UndefinedMetricError(f"{name}: input contains NaN or infinite values")
    return arr


def _same_length(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: inputs have lengths {a.size} and {b.size}")


def accuracy(predicted: Sequence[int], actual: Sequence[int]) -> float:
    p = np.asarray(predicted).reshape(-1)
    t = np.asarray(actual).reshape(-1)
    _same_length(p, t, "accuracy")
    if p.size == 0:
        raise UndefinedMetricError("accuracy: empty input")
    return float(np.mean(p == t))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    _, inverse, counts = np.unique(a, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts).astype(np.float64)
    return ((ends - counts + 1 + ends) / 2.0)[inverse.reshape(-1)]


def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied pairs) / (P * N)."""
    s = _vector(scores, "auc_roc")
    y = np.asarray(labels).reshape(-1)
    _same_length(s, y, "auc_roc")
    if not np.all((y == 0) | (y == 1)):
        raise UndefinedMetricError("auc_roc: labels must be 0 or 1")
    positives = int(np.sum(y == 1))
    negatives = y.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError("auc_roc is undefined when only one class is present")
    rank_sum = float(average_ranks(s)[y == 1].sum())
    return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    a = _vector(x, "spearman_rho")
    b = _vector(y, "spearman_rho")
    _same_length(a, b, "spearman_rho")
    if a.size < 2:
        raise UndefinedMetricError("spearman_rho needs at least two points")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = float(np.sqrt(np.sum(ra * ra) * np.sum(rb * rb)))
    if denom == 0.0:
        raise UndefinedMetricError("spearman_rho is undefined for a constant input")
    return float(np.clip(np.sum(ra * rb) / denom, -1.0, 1.0))


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (ca != cb),
                )
            )
        previous = current
    return previous[-1]


def sequence_identity(a: str, b: str) -> float:
    """1 - edit distance / length of the longer string."""
    if not a or not b:
        raise UndefinedMetricError("sequence_identity needs two non-empty sequences")
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))
