"""Recovery metrics for node features and graph structure.

Structure metrics use the strict upper triangle only: the diagonal is never
part of an adjacency and symmetric pairs are counted once. AUC and AP are
``nan`` when the ground truth has no positive or no negative pair.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError

UNDEFINED = float("nan")
CONVENTION = "structure metrics over strict upper-triangle node pairs (diagonal excluded)"


@dataclass
class RecoveryMetrics:
    feature_mse: float
    feature_acc: float
    structure_auc: float
    structure_ap: float
    edge_acc: float

    def as_dict(self) -> dict:
        return asdict(self)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def feature_mse(x_true, x_hat) -> float:
    x_true, x_hat = _same_shape(x_true, x_hat)
    return float(np.mean((x_true - x_hat) ** 2))


def feature_acc(x_true, x_hat) -> float:
    """Fraction of rows whose argmax agrees; ``np.argmax`` breaks ties low."""
    x_true, x_hat = _same_shape(x_true, x_hat)
    onehot = ((x_true == 0) | (x_true == 1)).all(axis=1) & (x_true.sum(axis=1) == 1)
    if not onehot.all():
        raise ValueError("ground-truth features must be one-hot rows")
    return float(np.mean(np.argmax(x_hat, axis=1) == np.argmax(x_true, axis=1)))


def upper_pairs(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    return m[np.triu_indices(m.shape[0], 1)]


def auc_score(labels, scores) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(scores)  # average ranks over ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(labels, scores) -> float:
    """Sum over distinct score thresholds (descending) of ``precision * delta recall``."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return UNDEFINED
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each tied score block
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def structure_auc_ap(adj_true, edge_probs) -> tuple[float, float]:
    adj_true, edge_probs = _same_shape(adj_true, edge_probs)
    y = upper_pairs(adj_true) > 0.5
    s = upper_pairs(edge_probs)
    if y.all() or not y.any():
        return UNDEFINED, UNDEFINED
    return auc_score(y, s), average_precision(y, s)


def edge_acc(adj_true, adj_hat) -> float:
    adj_true, adj_hat = _same_shape(adj_true, adj_hat)
    t, h = upper_pairs(adj_true), upper_pairs(adj_hat)
    if t.size == 0:
        return 1.0
    return float(np.mean(t == h))


def evaluate(x_true, adj_true, x_hat, edge_probs, adj_hat) -> RecoveryMetrics:
    mse = feature_mse(x_true, x_hat)
    try:
        acc = feature_acc(x_true, x_hat)
    except ValueError:  # continuous ground-truth features
        acc = UNDEFINED
    auc, ap = structure_auc_ap(adj_true, edge_probs)
    return RecoveryMetrics(mse, acc, auc, ap, edge_acc(adj_true, adj_hat))
