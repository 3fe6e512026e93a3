import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fglleak.errors import ShapeError
from fglleak.metrics import (
    auc_score,
    average_precision,
    edge_acc,
    evaluate,
    feature_acc,
    feature_mse,
    structure_auc_ap,
)
from fglleak.verify import check_metric_oracles, pair_auc, staircase_ap


def sym(rng, n, p=0.4):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return (upper | upper.T).astype(float)


def test_mse_examples():
    x = np.arange(6.0).reshape(2, 3)
    assert feature_mse(x, x) == 0.0
    assert feature_mse(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    total = 0.0
    for i in range(4):
        for j in range(3):
            total += (a[i, j] - b[i, j]) ** 2
    assert feature_mse(a, b) == pytest.approx(total / 12, abs=1e-15)
    with pytest.raises(ShapeError):
        feature_mse(a, b[:3])


def test_acc_examples():
    x = np.eye(4)[[0, 2, 1, 3]]
    assert feature_acc(x, x) == 1.0
    assert feature_acc(x, -x + 0.5) == 0.0
    rng = np.random.default_rng(1)
    truth = np.eye(37)[rng.integers(0, 37, size=50)]
    guess = rng.random((50, 37))
    assert feature_acc(truth, guess) == np.mean([np.argmax(g) == np.argmax(t) for g, t in zip(guess, truth)])
    with pytest.raises(ValueError):
        feature_acc(np.full((2, 2), 0.5), np.zeros((2, 2)))


def test_acc_ties_break_low():
    assert feature_acc(np.array([[1.0, 0.0]]), np.array([[0.3, 0.3]])) == 1.0


def test_auc_ap_examples():
    rng = np.random.default_rng(2)
    adj = sym(rng, 6)
    assert structure_auc_ap(adj, adj) == (1.0, 1.0)
    auc, _ = structure_auc_ap(adj, np.full((6, 6), 0.5))
    assert auc == 0.5
    assert all(math.isnan(v) for v in structure_auc_ap(np.zeros((4, 4)), rng.random((4, 4))))
    full = np.ones((3, 3)) - np.eye(3)
    assert all(math.isnan(v) for v in structure_auc_ap(full, rng.random((3, 3))))


def test_six_node_against_enumeration():
    rng = np.random.default_rng(3)
    adj = sym(rng, 6, 0.5)
    probs = np.round(rng.random((6, 6)), 1)
    iu = np.triu_indices(6, 1)
    y, s = adj[iu] > 0, probs[iu]
    auc, ap = structure_auc_ap(adj, probs)
    assert auc == pytest.approx(pair_auc(y, s), abs=1e-12)
    assert ap == pytest.approx(staircase_ap(y, s), abs=1e-12)


def test_diagonal_and_lower_triangle_ignored():
    rng = np.random.default_rng(4)
    adj = sym(rng, 5, 0.5)
    probs = rng.random((5, 5))
    noisy = probs.copy()
    noisy[np.tril_indices(5)] = rng.random(15)
    assert structure_auc_ap(adj, probs) == structure_auc_ap(adj, noisy)


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 8), st.integers(0, 2 ** 31))
def test_auc_monotone_invariance_and_complement(n, seed):
    rng = np.random.default_rng(seed)
    adj = sym(rng, n, 0.5)
    probs = rng.random((n, n))
    auc, _ = structure_auc_ap(adj, probs)
    if math.isnan(auc):
        return
    assert structure_auc_ap(adj, probs ** 3)[0] == pytest.approx(auc, abs=1e-12)
    assert structure_auc_ap(adj, 1 / (1 + np.exp(-4 * (probs - 0.5))))[0] == pytest.approx(auc, abs=1e-12)
    assert auc + structure_auc_ap(adj, 1 - probs)[0] == pytest.approx(1.0, abs=1e-12)


def test_ap_bounds():
    labels = np.array([1, 0, 0, 1, 0, 0], dtype=bool)
    prevalence = labels.mean()
    best_first = np.array([0.9, 0.1, 0.2, 0.3, 0.4, 0.5])
    assert average_precision(labels, best_first) >= prevalence
    reversed_perfect = np.where(labels, 0.0, 1.0) + np.arange(6) * 1e-3
    assert average_precision(labels, reversed_perfect) == pytest.approx(staircase_ap(labels, reversed_perfect))
    assert auc_score(labels, reversed_perfect) == 0.0


def test_edge_acc_examples():
    rng = np.random.default_rng(5)
    a = sym(rng, 7)
    assert edge_acc(a, a) == 1.0
    comp = 1 - a - np.eye(7)
    assert edge_acc(a, comp) == 0.0
    b = sym(rng, 7)
    agree = sum(a[i, j] == b[i, j] for i in range(7) for j in range(i + 1, 7))
    assert edge_acc(a, b) == agree / 21


def test_evaluate_continuous_features():
    rng = np.random.default_rng(6)
    adj = sym(rng, 4, 0.5)
    m = evaluate(rng.normal(size=(4, 2)), adj, np.zeros((4, 2)), adj, adj)
    assert math.isnan(m.feature_acc) and m.edge_acc == 1.0


def test_oracle_suite():
    assert check_metric_oracles(300).passed
