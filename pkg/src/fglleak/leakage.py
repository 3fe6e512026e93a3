"""Closed-form leakage from shared gradients.

Two results drive the attack:

* the classifier gradients are an outer product ``dL/dlogits x H_G``, so any
  row with a non-zero bias gradient divides out the pooled embedding exactly;
* with an adjacency estimate, each GCN gradient ``dW_k = H_{k-1}^T r_k`` is a
  linear system in the layer input once ``r_k`` is known, and ``r_k`` is
  built from the layer above. Solving from the top layer down yields node
  features (GNFR).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InversionError, LeakageUnavailableError, RecoveryDegenerateError
from .graph import normalize_adjacency
from .nn import GradientBundle, ModelParams, solve_min_norm

BIAS_EPS = 1e-12


@dataclass
class AttackConfig:
    mmd_weight: float = 0.2
    lr: float = 1e-3
    epochs: int = 500
    hidden: tuple[int, int] = (100, 250)
    edge_threshold: float = 0.5
    assume_known_node_count: bool = True
    rcond: float = 1e-10
    mask_tol: float = 1e-8
    adapter: bool = True

    def __post_init__(self):
        if self.mmd_weight < 0:
            raise ConfigError("MMD weight must be >= 0")
        if not 0.0 < self.edge_threshold < 1.0:
            raise ConfigError("edge threshold must lie in (0, 1)")
        if self.epochs < 0 or not self.lr > 0:
            raise ConfigError("invalid decoder training schedule")


@dataclass
class LeakedEmbedding:
    pooled: np.ndarray
    logit_grad: np.ndarray
    row: int
    residual: float
    source: dict = field(default_factory=dict)

    @property
    def consistent(self) -> bool:
        """Whether ``grad_fc`` is the outer product the extraction assumes."""
        return self.residual < 1e-8


def extract_embedding(bundle: GradientBundle, source: dict | None = None) -> LeakedEmbedding:
    """Divide out the pooled embedding from the classifier gradients.

    Uses the row with the largest bias gradient. ``residual`` is the relative
    Frobenius error of reconstructing ``grad_fc`` as an outer product, which
    is ~0 for undefended single-graph gradients.
    """
    gb = np.asarray(bundle.grad_b, dtype=np.float64)
    j = int(np.argmax(np.abs(gb)))
    if abs(gb[j]) <= BIAS_EPS:
        raise LeakageUnavailableError("all bias gradients vanish; no embedding can be divided out")
    pooled = bundle.grad_fc[j] / gb[j]
    recon = np.outer(gb, pooled)
    denom = max(np.linalg.norm(bundle.grad_fc), 1e-300)
    residual = float(np.linalg.norm(bundle.grad_fc - recon) / denom)
    return LeakedEmbedding(pooled, gb.copy(), j, residual, dict(source or {}))


def invert_mlp_stack(leaked: np.ndarray, layers: Sequence[tuple[np.ndarray, np.ndarray]],
                     rcond: float = 1e-10) -> np.ndarray:
    """Recover the stack's first input from the leaked input of its last layer.

    ``layers`` is the full classifier as ``(W_t, b_t)`` pairs with
    ``x_t = W_t x_{t-1} + b_t``. The leaked vector is ``x_{T-1}``; layers
    ``T-1 .. 1`` are inverted by min-norm least squares.
    """
    x = np.asarray(leaked, dtype=np.float64)
    for w, b in reversed(list(layers)[:-1]):
        w = np.asarray(w, dtype=np.float64)
        if not np.any(w):
            raise InversionError("cannot invert a layer with an all-zero weight matrix")
        x = solve_min_norm(w, x - np.asarray(b, dtype=np.float64), rcond)
    return x


@dataclass
class RecoveredGraph:
    edge_probabilities: np.ndarray
    adjacency_hat: np.ndarray
    features_hat: np.ndarray
    layer_embeddings: list[np.ndarray] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def threshold_adjacency(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Symmetrize, clear the diagonal and threshold (ties count as edges)."""
    p = (probs + probs.T) / 2.0
    np.fill_diagonal(p, 0.0)
    a = (p >= threshold).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return a


def relu_mask(h: np.ndarray, rel_tol: float = 1e-8) -> np.ndarray:
    """1 where a recovered activation is positive beyond solver round-off."""
    scale = float(np.abs(h).max(initial=0.0))
    return (h > rel_tol * scale).astype(np.float64)


def _top_pool_weights(params: ModelParams, n: int) -> np.ndarray:
    # max pooling needs the unknown top-layer embedding; mean weights stand in
    if params.pooling.kind == "max":
        return np.full((n, 1), 1.0 / n)
    return params.pooling.matrix(n).T


def gnfr(params: ModelParams, bundle: GradientBundle, adjacency_hat: np.ndarray,
         node_count: int | None = None, cfg: AttackConfig | None = None,
         top_mask: np.ndarray | None = None) -> RecoveredGraph:
    """Recover node features layer by layer from the GCN gradients.

    ``top_mask`` overrides the all-ones ReLU-derivative initialisation of the
    top layer (used by oracle checks). Raises
    :class:`RecoveryDegenerateError` when a layer's coefficients vanish while
    its gradient does not.
    """
    cfg = cfg or AttackConfig()
    a_hat = np.asarray(adjacency_hat, dtype=np.float64)
    n = a_hat.shape[0] if node_count is None else int(node_count)
    if a_hat.shape != (n, n):
        raise ConfigError(f"adjacency estimate {a_hat.shape} does not match {n} nodes")
    abar_t = normalize_adjacency(a_hat).matrix.T

    dlogits = np.asarray(bundle.grad_b, dtype=np.float64)
    top = _top_pool_weights(params, n) @ (dlogits @ params.fc)[None, :]
    mask = np.ones_like(top) if top_mask is None else np.asarray(top_mask, dtype=np.float64)
    r = abar_t @ (top * mask)

    recovered: list[np.ndarray] = []
    for k in range(params.layers, 0, -1):
        grad = bundle.grad_gcn[k - 1]
        if not np.any(r) and np.any(grad):
            raise RecoveryDegenerateError(f"coefficients of GCN layer {k} vanished")
        h_prev = solve_min_norm(r.T, grad.T, cfg.rcond)
        recovered.append(h_prev)
        if k > 1:
            mask = relu_mask(h_prev, cfg.mask_tol)
            r = abar_t @ ((r @ params.gcn_weights[k - 1].T) * mask)
    recovered.reverse()  # recovered[k] estimates H_k, k = 0..l-1
    return RecoveredGraph(
        edge_probabilities=a_hat.copy(),
        adjacency_hat=a_hat.copy(),
        features_hat=recovered[0],
        layer_embeddings=recovered,
        provenance={"features": "gnfr", "top_mask": "given" if top_mask is not None else "ones"},
    )


def gnfr_residuals(params: ModelParams, bundle: GradientBundle, rec: RecoveredGraph) -> list[float]:
    """``||r_k^T Hhat_{k-1} - dW_k^T||_F`` per layer, recomputed from the recovery."""
    abar_t = normalize_adjacency(rec.adjacency_hat).matrix.T
    n = rec.adjacency_hat.shape[0]
    top = _top_pool_weights(params, n) @ (bundle.grad_b @ params.fc)[None, :]
    r = abar_t @ top
    out = []
    for k in range(params.layers, 0, -1):
        h_prev = rec.layer_embeddings[k - 1]
        out.append(float(np.linalg.norm(r.T @ h_prev - bundle.grad_gcn[k - 1].T)))
        if k > 1:
            r = abar_t @ ((r @ params.gcn_weights[k - 1].T) * relu_mask(h_prev))
    return out[::-1]


def random_baseline(node_count: int, feature_dim: int, rng: np.random.Generator,
                    threshold: float = 0.5) -> RecoveredGraph:
    """Uniform[0,1] features and uniform[0,1] symmetric edge scores."""
    x = rng.random((node_count, feature_dim))
    upper = np.triu(rng.random((node_count, node_count)), 1)
    probs = upper + upper.T
    return RecoveredGraph(probs, threshold_adjacency(probs, threshold), x, [x],
                          {"features": "random", "structure": "random"})
