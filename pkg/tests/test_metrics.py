import numpy as np
import pytest

from dmegp import auc, rmse
from helpers import pairwise_auc


def test_rmse_identical_is_zero():
    x = np.array([1.0, -2.0, 3.0])
    assert rmse(x, x) == 0.0


def test_rmse_known_value():
    assert rmse(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == pytest.approx(
        np.sqrt(12.5))


def test_auc_perfect_separation():
    assert auc(np.array([1, 0]), np.array([0.9, 0.1])) == 1.0


def test_auc_constant_scores_half():
    labels = np.array([1, 0, 1, 0, 0])
    assert auc(labels, np.zeros(5)) == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        # quantized scores force ties
        scores = np.round(rng.uniform(size=n), 1)
        assert auc(labels, scores) == pytest.approx(
            pairwise_auc(labels, scores), abs=1e-12)


def test_auc_requires_both_classes():
    with pytest.raises(ValueError):
        auc(np.ones(4), np.arange(4.0))
