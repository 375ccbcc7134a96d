"""Rating-prediction metrics: RMSE and per-user NDCG@n."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PredictionSet", "rmse", "ndcg_at_n", "dcg"]


@dataclass
class PredictionSet:
    users: np.ndarray
    items: np.ndarray
    truth: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users)
        self.items = np.asarray(self.items)
        self.truth = np.asarray(self.truth, dtype=float)
        self.predicted = np.asarray(self.predicted, dtype=float)
        n = len(self.truth)
        if n == 0:
            raise ValueError("empty prediction set")
        if not (len(self.users) == len(self.items) == len(self.predicted) == n):
            raise ValueError("users, items, truth and predicted must have equal length")
        if not np.all(np.isfinite(self.predicted)):
            raise ValueError("non-finite prediction")

    def __len__(self):
        return len(self.truth)


def rmse(ps: PredictionSet) -> float:
    err = ps.truth - ps.predicted
    return float(np.sqrt(np.mean(err * err)))


def dcg(relevance) -> float:
    rel = np.asarray(relevance, dtype=float)
    return float(np.sum((2.0 ** rel - 1.0) / np.log2(np.arange(2, len(rel) + 2))))


def ndcg_at_n(ps: PredictionSet, n: int = 10) -> float:
    """Mean over users of NDCG@n on each user's test items.

    Items are ranked by predicted rating, ties going to the smaller item id.
    Gains are ``2**r - 1`` of the true rating.  Users with fewer than ``n``
    test items are scored on all of them.  A user whose ideal DCG is zero
    counts as a perfect ranking.
    """
    if n < 1:
        raise ValueError("n must be positive")
    order = np.lexsort((ps.items, -ps.predicted, ps.users))
    users = ps.users[order]
    truth = ps.truth[order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    ends = np.r_[starts[1:], len(users)]
    scores = np.empty(len(starts))
    for k, (s, e) in enumerate(zip(starts, ends)):
        ranked = truth[s:e]
        ideal = np.sort(ranked)[::-1][:n]
        best = dcg(ideal)
        scores[k] = dcg(ranked[:n]) / best if best > 0 else 1.0
    return float(scores.mean())
