import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesorec.metrics import PredictionSet, dcg, ndcg_at_n, rmse


def ps(truth, pred, users=None, items=None):
    n = len(truth)
    users = np.zeros(n, int) if users is None else users
    items = np.arange(n) if items is None else items
    return PredictionSet(users, items, truth, pred)


class TestRMSE:
    def test_perfect(self):
        assert rmse(ps([1, 2, 3], [1, 2, 3])) == 0.0

    def test_single(self):
        assert rmse(ps([3], [5])) == 2.0

    def test_scalar_oracle(self):
        t, p = [4, 2, 5, 1, 3], [3.5, 2.5, 4, 2, 3]
        total = 0.0
        for a, b in zip(t, p):
            total += (a - b) ** 2
        assert rmse(ps(t, p)) == pytest.approx((total / 5) ** 0.5)

    def test_order_invariant_and_scaling(self, rng):
        t, p = rng.uniform(1, 5, 50), rng.uniform(1, 5, 50)
        perm = rng.permutation(50)
        assert rmse(ps(t, p)) == pytest.approx(rmse(ps(t[perm], p[perm])))
        assert rmse(ps(t, t + 3 * (p - t))) == pytest.approx(3 * rmse(ps(t, p)))


class TestValidation:
    def test_empty(self):
        with pytest.raises(ValueError):
            ps([], [])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            ps([1.0], [np.nan])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            PredictionSet([0, 1], [0], [1, 2], [1, 2])


def brute_ndcg(truth, pred, n):
    """Rank by prediction (ties by index), ideal DCG by enumerating every ordering."""
    order = sorted(range(len(truth)), key=lambda k: (-pred[k], k))
    got = sum((2 ** truth[k] - 1) / np.log2(r + 2) for r, k in enumerate(order[:n]))
    best = max(sum((2 ** truth[k] - 1) / np.log2(r + 2) for r, k in enumerate(perm[:n]))
               for perm in itertools.permutations(range(len(truth))))
    return got / best if best > 0 else 1.0


class TestNDCG:
    def test_perfect(self):
        assert ndcg_at_n(ps([5, 3, 1, 4], [5, 3, 1, 4])) == 1.0

    def test_single_item_per_user(self):
        assert ndcg_at_n(PredictionSet([0, 1, 2], [0, 0, 0], [1, 5, 3], [4, 1, 2])) == 1.0

    def test_one_swap_matches_enumeration(self):
        truth, pred = [5, 4, 2, 1], [4.0, 5.0, 2.0, 1.0]
        assert ndcg_at_n(ps(truth, pred), 10) == pytest.approx(brute_ndcg(truth, pred, 10))
        assert ndcg_at_n(ps(truth, pred), 10) < 1

    def test_cutoff(self):
        truth, pred = [1, 1, 5, 1, 1], [5.0, 4.0, 3.0, 2.0, 1.0]
        assert ndcg_at_n(ps(truth, pred), 2) == pytest.approx(brute_ndcg(truth, pred, 2))

    def test_tie_break_by_item_id(self):
        a = ndcg_at_n(PredictionSet([0, 0], [1, 0], [5, 1], [3.0, 3.0]))
        assert a == pytest.approx(dcg([1, 5]) / dcg([5, 1]))

    def test_mean_over_users(self):
        p = PredictionSet([0, 0, 1, 1], [0, 1, 0, 1], [5, 1, 5, 1], [2.0, 1.0, 1.0, 2.0])
        assert ndcg_at_n(p) == pytest.approx((1 + dcg([1, 5]) / dcg([5, 1])) / 2)

    def test_all_zero_relevance(self):
        assert ndcg_at_n(ps([0, 0], [1, 2])) == 1.0

    def test_bad_n(self):
        with pytest.raises(ValueError):
            ndcg_at_n(ps([1], [1]), 0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.integers(0, 10_000), st.integers(1, 6))
    def test_matches_enumeration(self, truth, seed, n):
        pred = np.random.default_rng(seed).uniform(0, 5, len(truth))
        v = ndcg_at_n(ps(truth, pred), n)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(brute_ndcg(truth, list(pred), n))

    def test_monotone_transform_invariant(self, rng):
        users = np.repeat(np.arange(5), 8)
        items = np.tile(np.arange(8), 5)
        truth = rng.integers(1, 6, 40)
        pred = rng.uniform(0, 5, 40)
        a = ndcg_at_n(PredictionSet(users, items, truth, pred))
        b = ndcg_at_n(PredictionSet(users, items, truth, np.exp(pred) * 3 - 7))
        assert a == b
