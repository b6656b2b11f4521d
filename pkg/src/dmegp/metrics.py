"""Evaluation metrics: RMSE and tie-averaged AUC."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionMismatch

__all__ = ["rmse", "auc"]


def rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise DimensionMismatch(f"{p.shape} predictions vs {t.shape} targets")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-statistic formula.

    Ties receive average ranks, so constant scores give exactly 0.5.
    Labels must contain both classes.
    """
    y = np.asarray(labels).ravel().astype(np.float64)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise DimensionMismatch(f"{y.shape} labels vs {s.shape} scores")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != y.size:
        raise ValueError("AUC needs binary labels with both classes present")
    ranks = rankdata(s, method="average")
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
