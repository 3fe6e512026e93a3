"""Self-checks run by ``fglleak verify``.

Each check builds random instances, compares an implementation path against
an independent oracle (finite differences, brute-force enumeration, explicit
Kronecker systems) and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import Graph, erdos_renyi_adjacency
from .leakage import extract_embedding, gnfr
from .metrics import auc_score, average_precision
from .nn import ModelParams, PoolingDescriptor, backward_analytic, forward, solve_min_norm


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# random instances


def random_graph(rng: np.random.Generator, n: int, d: int, p: float = 0.4, classes: int = 2) -> Graph:
    return Graph(rng.normal(size=(n, d)), erdos_renyi_adjacency(n, p, rng), int(rng.integers(classes)))


def random_params(rng, d_in: int, hidden: list[int], classes: int, pooling: str = "sum",
                  scale: float = 1.0) -> ModelParams:
    sizes = [d_in, *hidden]
    ws = [rng.normal(scale=scale / np.sqrt(a), size=(a, b)) for a, b in zip(sizes, sizes[1:])]
    return ModelParams(ws, rng.normal(size=(classes, sizes[-1])), rng.normal(size=classes),
                       PoolingDescriptor(pooling))


def kink_margin(params: ModelParams, g: Graph) -> float:
    """Smallest |pre-activation|; finite differences are unreliable near ReLU kinks."""
    tr = forward(params, g)
    return float(min(np.abs(z).min() for z in tr.pre_activations))


def random_gradient_instance(rng, max_nodes=10, max_layers=4, max_hidden=8, pooling=None,
                             margin=1e-4):
    while True:
        n = int(rng.integers(1, max_nodes + 1))
        l = int(rng.integers(2, max_layers + 1))
        d = int(rng.integers(1, 6))
        hidden = [int(h) for h in rng.integers(1, max_hidden + 1, size=l)]
        pool = pooling or ("sum", "mean")[int(rng.integers(2))]
        params = random_params(rng, d, hidden, int(rng.integers(2, 4)), pool)
        g = random_graph(rng, n, d, classes=params.classes)
        tr = forward(params, g)
        # need some live units, and no unit within finite-difference reach of its kink
        if kink_margin(params, g) > margin and all(m.any() for m in tr.relu_masks):
            return params, g


# ---------------------------------------------------------------------------
# oracles


def finite_difference_grads(params: ModelParams, g: Graph, h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of the loss w.r.t. every parameter entry."""
    base = [a.copy() for a in params.arrays()]
    out = []
    for k, a in enumerate(base):
        grad = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k][idx] += h
            minus[k][idx] -= h
            lp = forward(params.with_arrays(plus), g).loss
            lm = forward(params.with_arrays(minus), g).loss
            grad[idx] = (lp - lm) / (2 * h)
        out.append(grad)
    return out


def gradient_mismatch(analytic, numeric, rel_tol=1e-5, abs_floor=1e-8) -> tuple[bool, float, float]:
    """An entry fails when its error exceeds both ``abs_floor`` and ``rel_tol * scale``.

    Returns ``(ok, worst relative error above the floor, worst absolute error)``.
    """
    worst_rel = worst_abs = 0.0
    ok = True
    for a, f in zip(analytic, numeric):
        err = np.abs(a - f)
        scale = np.maximum(np.abs(a), np.abs(f))
        bad = (err > abs_floor) & (err > rel_tol * scale)
        ok &= not bad.any()
        rel = np.where(err > abs_floor, err / np.maximum(scale, 1e-300), 0.0)
        worst_rel = max(worst_rel, float(rel.max(initial=0.0)))
        worst_abs = max(worst_abs, float(err.max(initial=0.0)))
    return ok, worst_rel, worst_abs


def pair_auc(labels, scores) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def staircase_ap(labels, scores) -> float:
    """AP from the explicit precision-recall staircase over distinct thresholds."""
    n_pos = sum(bool(y) for y in labels)
    prev_recall = 0.0
    ap = 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(bool(y) for y in sel)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return ap


def oracle_recovery_instance(rng, n: int, d_in: int, hidden: int, layers: int = 2):
    """Instance on which GNFR is fully determined given the true top-layer mask.

    Accepts only draws where every coefficient matrix has full node rank.
    """
    while True:
        params = random_params(rng, d_in, [hidden] * layers, int(rng.integers(2, 4)), "sum")
        g = random_graph(rng, n, d_in, classes=params.classes)
        tr = forward(params, g)
        if kink_margin(params, g) < 1e-3:
            continue
        bundle = backward_analytic(tr, params, g)
        # rebuild the coefficient matrices to check conditioning
        abar_t = tr.abar.T
        top = np.ones((n, 1)) @ (bundle.grad_b @ params.fc)[None, :]
        r = abar_t @ (top * tr.relu_masks[-1])
        ok = True
        for k in range(layers, 0, -1):
            s = np.linalg.svd(r, compute_uv=False)
            if s.size < n or not s[n - 1] > 1e-3 * s[0]:
                ok = False
                break
            if k > 1:
                r = abar_t @ ((r @ params.gcn_weights[k - 1].T) * tr.relu_masks[k - 2])
        if ok:
            return params, g, tr, bundle


# ---------------------------------------------------------------------------
# checks


def check_gradients(instances: int, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    for i in range(instances):
        params, g = random_gradient_instance(rng)
        tr = forward(params, g)
        ok, rel, err = gradient_mismatch(backward_analytic(tr, params, g).arrays(),
                                         finite_difference_grads(params, g))
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, err)
        if not ok:
            return CheckResult("gradient-recursion", False,
                               f"instance {i}: max rel err {rel:.3g}, max abs err {err:.3g}")
    return CheckResult("gradient-recursion", True, f"{instances} instances, max abs err {worst_abs:.3g}, "
                       f"max rel err above 1e-8 floor {worst_rel:.3g}")


def check_embedding_leak(instances: int, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        params, g = random_gradient_instance(rng, margin=0.0)
        tr = forward(params, g)
        leak = extract_embedding(backward_analytic(tr, params, g))
        worst = max(worst, float(np.abs(leak.pooled - tr.pooled).max()))
    return CheckResult("embedding-leak", worst < 1e-9, f"{instances} instances, max abs err {worst:.3g}")


def check_gnfr_oracle(instances: int, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        params, g, tr, bundle = oracle_recovery_instance(rng, n, int(rng.integers(1, 5)), 8)
        rec = gnfr(params, bundle, g.adjacency, n, top_mask=tr.relu_masks[-1])
        worst = max(worst, float(np.abs(rec.features_hat - g.node_features).max()))
    return CheckResult("gnfr-exact-recovery", worst < 1e-6,
                       f"{instances} instances (true top mask), max abs err {worst:.3g}")


def check_kronecker(instances: int, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, dk, dprev = (int(v) for v in rng.integers(1, 7, size=3))
        r = rng.normal(size=(n, dk))
        grad = rng.normal(size=(dprev, dk))
        blockwise = solve_min_norm(r.T, grad.T)
        big = np.kron(r.T, np.eye(dprev))
        x, *_ = np.linalg.lstsq(big, grad.T.ravel(), rcond=None)
        worst = max(worst, float(np.abs(blockwise - x.reshape(n, dprev)).max()))
    return CheckResult("kronecker-equivalence", worst < 1e-8, f"max abs diff {worst:.3g}")


def check_metric_oracles(instances: int, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < instances:
        n = int(rng.integers(2, 9))
        iu = np.triu_indices(n, 1)
        labels = rng.random(len(iu[0])) < 0.4
        if labels.all() or not labels.any():
            continue
        scores = np.round(rng.random(len(labels)), int(rng.integers(1, 4)))  # force some ties
        worst = max(worst, abs(auc_score(labels, scores) - pair_auc(labels, scores)),
                    abs(average_precision(labels, scores) - staircase_ap(labels, scores)))
        done += 1
    return CheckResult("metric-oracles", worst <= 1e-12, f"{instances} instances, max diff {worst:.3g}")


CHECKS: dict[str, tuple[Callable[[int], CheckResult], int, int]] = {
    # name: (check, full-size, quick-size)
    "gradient-recursion": (check_gradients, 200, 20),
    "embedding-leak": (check_embedding_leak, 100, 20),
    "gnfr-exact-recovery": (check_gnfr_oracle, 50, 10),
    "kronecker-equivalence": (check_kronecker, 200, 50),
    "metric-oracles": (check_metric_oracles, 1000, 200),
}


def run_checks(quick: bool = False) -> list[CheckResult]:
    results = []
    for name, (fn, full, small) in CHECKS.items():
        t0 = time.perf_counter()
        res = fn(small if quick else full)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
