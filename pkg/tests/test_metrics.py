"""Tests for benchmark metrics against brute-force references."""

from functools import lru_cache

import numpy as np
import pytest

from plm_kit.errors import ShapeError, UndefinedMetricError
from plm_kit.metrics import (
    accuracy,
    auc_roc,
    average_ranks,
    levenshtein,
    sequence_identity,
    spearman_rho,
)


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def _slow_ranks(values):
    values = list(values)
    return np.array(
        [
            1 + sum(u < v for u in values) + (sum(u == v for u in values) - 1) / 2
            for v in values
        ]
    )


def _slow_spearman(x, y):
    rx, ry = _slow_ranks(x), _slow_ranks(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def _slow_levenshtein(a, b):
    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0 or j == 0:
            return i + j
        substitute = dist(i - 1, j - 1) + (a[i - 1] != b[j - 1])
        return min(dist(i - 1, j) + 1, dist(i, j - 1) + 1, substitute)

    return dist(len(a), len(b))


# ── Accuracy ──────────────────────────────────────────────


class TestAccuracy:
    def test_fraction_correct(self):
        assert accuracy([0, 1, 2, 1], [0, 1, 1, 1]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            accuracy([0, 1], [0])

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            accuracy([], [])


# ── AUC-ROC ───────────────────────────────────────────────


class TestAuc:
    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # coarse scores so ties occur
            scores = rng.integers(0, 5, size=n) / 4.0
            assert auc_roc(scores, labels) == pytest.approx(
                _pairwise_auc(scores, labels), abs=1e-12
            )

    def test_perfect_and_inverted(self):
        assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc_roc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied_is_half(self):
        assert auc_roc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=50)
        labels = np.arange(50) % 2
        assert auc_roc(np.exp(scores), labels) == pytest.approx(auc_roc(scores, labels))

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc_roc([0.1, 0.2], [1, 1])

    def test_non_binary_labels(self):
        with pytest.raises(UndefinedMetricError):
            auc_roc([0.1, 0.2], [0, 2])

    def test_nan_scores(self):
        with pytest.raises(UndefinedMetricError):
            auc_roc([0.1, float("nan")], [0, 1])


# ── Spearman ──────────────────────────────────────────────


class TestSpearman:
    def test_average_ranks(self):
        np.testing.assert_array_equal(average_ranks([10, 20, 20, 5]), [2.0, 3.5, 3.5, 1.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 200:
            n = int(rng.integers(3, 25))
            x = rng.integers(0, 6, size=n).astype(float)
            y = rng.integers(0, 6, size=n).astype(float)
            if np.all(x == x[0]) or np.all(y == y[0]):
                continue
            assert spearman_rho(x, y) == pytest.approx(_slow_spearman(x, y), abs=1e-12)
            checked += 1

    def test_monotone_relationship(self):
        x = np.linspace(0.1, 3.0, 20)
        assert spearman_rho(x, np.log(x)) == pytest.approx(1.0)
        assert spearman_rho(x, -(x**3)) == pytest.approx(-1.0)

    def test_constant_input(self):
        with pytest.raises(UndefinedMetricError):
            spearman_rho([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_few_points(self):
        with pytest.raises(UndefinedMetricError):
            spearman_rho([1.0], [2.0])


# ── Sequence identity ─────────────────────────────────────


class TestIdentity:
    def test_levenshtein_matches_recursion(self):
        rng = np.random.default_rng(3)
        letters = list("ACDE")
        for _ in range(200):
            a = "".join(rng.choice(letters, size=int(rng.integers(0, 9))))
            b = "".join(rng.choice(letters, size=int(rng.integers(0, 9))))
            assert levenshtein(a, b) == _slow_levenshtein(a, b)

    def test_known_distances(self):
        assert levenshtein("kitten", "sitting") == 3
        assert levenshtein("", "ACD") == 3
        assert levenshtein("MKV", "MKV") == 0

    def test_identity(self):
        assert sequence_identity("MKVL", "MKVL") == 1.0
        assert sequence_identity("MKVL", "MKV") == 0.75
        assert sequence_identity("AAAA", "CCCC") == 0.0

    def test_identity_is_symmetric(self):
        assert sequence_identity("MKVLA", "MKLA") == sequence_identity("MKLA", "MKVLA")

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            sequence_identity("", "MKV")
