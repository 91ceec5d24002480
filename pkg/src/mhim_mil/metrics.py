"""Bag-level evaluation: AUC, F1-optimal threshold, and mean/std aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyList, SingleClass


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClass("both classes must be present")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied pos/neg pairs count one half."""
    s, y = _split(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _confusion(s, y, threshold):
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    acc = float(np.mean(pred == (y == 1)))
    denom = 2 * tp + fp + fn
    f1 = 2.0 * tp / denom if denom else 0.0
    return acc, f1


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.concatenate(([-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]))


def optimal_threshold(scores, labels) -> tuple[float, float, float]:
    """Threshold maximising F1 (then accuracy, then lowest threshold).

    Predictions are ``score > threshold``.  Returns ``(threshold, accuracy, f1)``.
    """
    s, y = _split(scores, labels)
    best = None
    for thr in threshold_candidates(s):
        acc, f1 = _confusion(s, y, thr)
        # candidates ascend, so strict improvement keeps the lowest threshold
        if best is None or (f1, acc) > (best[2], best[1]):
            best = (float(thr), acc, f1)
    return best


@dataclass
class EvalResult:
    auc: float
    accuracy: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels) -> EvalResult:
    s, y = _split(scores, labels)
    thr, acc, f1 = optimal_threshold(s, y)
    n_pos = int(y.sum())
    return EvalResult(auc(s, y), acc, f1, thr, n_pos, int(y.size - n_pos))


def aggregate(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyList("cannot aggregate an empty list")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))
