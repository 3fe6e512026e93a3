"""Structure recovery: an MLP decoder from pooled embeddings to adjacency.

The frozen GCN stack of the federated model encodes auxiliary graphs into
pooled embeddings; a three-layer sigmoid MLP learns to map them back to a
zero-padded ``max_nodes x max_nodes`` adjacency. The heterogeneity adapter
reports ``L_recon + lambda * MMD`` but, because MMD under a frozen encoder
and identity feature map does not depend on decoder weights, its effect on
training is realised by importance-weighting auxiliary graphs toward the
victims' mean embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .graph import Graph
from .leakage import AttackConfig, LeakedEmbedding, threshold_adjacency
from .nn import AdamState, ModelParams, adam_step, forward


def encode_graphs(params: ModelParams, graphs: Sequence[Graph]) -> np.ndarray:
    """Pooled embeddings of ``graphs`` under the frozen GCN layers."""
    return np.stack([forward(params, g, label=0).pooled for g in graphs])


def mmd(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """Linear-kernel MMD: distance between the two embedding means."""
    return float(np.linalg.norm(np.mean(emb_a, axis=0) - np.mean(emb_b, axis=0)))


def adapter_weights(aux_emb: np.ndarray, victim_emb: np.ndarray, strength: float) -> np.ndarray:
    """Per-sample weights (summing to one) that pull the fit toward the victims.

    ``softmax(-d^2 / tau)`` where ``d`` is each auxiliary embedding's distance
    to the victim mean and ``tau`` the median of ``d^2``. A non-positive
    ``strength`` (the MMD weight) or no victim embeddings gives uniform weights.
    """
    n = aux_emb.shape[0]
    uniform = np.full(n, 1.0 / n)
    if strength <= 0 or victim_emb.size == 0:
        return uniform
    d2 = np.sum((aux_emb - victim_emb.mean(axis=0)) ** 2, axis=1)
    tau = np.median(d2)
    if tau <= 0:
        return uniform
    logits = -d2 / tau
    soft = np.exp(logits - logits.max())
    return soft / soft.sum()


def padded_adjacency(g: Graph, max_nodes: int) -> np.ndarray:
    out = np.zeros((max_nodes, max_nodes))
    n = g.node_count
    out[:n, :n] = g.adjacency
    return out


_OUT_EPS = 1e-15


def _sigmoid(z):
    # clamped so outputs stay strictly inside (0, 1) even when z saturates
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), _OUT_EPS, 1.0 - _OUT_EPS)


@dataclass
class StructureDecoder:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    max_nodes: int
    input_mean: np.ndarray
    input_scale: np.ndarray
    history: list[dict] = field(default_factory=list)

    @classmethod
    def init(cls, input_dim: int, max_nodes: int, hidden: Sequence[int], rng: np.random.Generator,
             input_mean=None, input_scale=None) -> "StructureDecoder":
        sizes = [input_dim, *hidden, max_nodes * max_nodes]
        ws, bs = [], []
        for a, b in zip(sizes, sizes[1:]):
            lim = np.sqrt(6.0 / (a + b))
            ws.append(rng.uniform(-lim, lim, size=(a, b)))
            bs.append(np.zeros(b))
        mean = np.zeros(input_dim) if input_mean is None else input_mean
        scale = np.ones(input_dim) if input_scale is None else input_scale
        return cls(ws, bs, max_nodes, mean, scale)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def _forward(self, emb: np.ndarray):
        h = (np.atleast_2d(emb) - self.input_mean) / self.input_scale
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _sigmoid(z) if i == len(self.weights) - 1 else np.maximum(z, 0.0)
            acts.append(h)
        return acts

    def predict(self, emb: np.ndarray) -> np.ndarray:
        """Raw sigmoid outputs, shape ``(batch, max_nodes, max_nodes)``."""
        out = self._forward(emb)[-1]
        return out.reshape(-1, self.max_nodes, self.max_nodes)

    def loss_and_grads(self, emb: np.ndarray, targets: np.ndarray, sample_weights: np.ndarray):
        """Weighted per-graph mean squared reconstruction error and its gradients."""
        acts = self._forward(emb)
        out = acts[-1]
        t = targets.reshape(out.shape)
        diff = out - t
        per_graph = np.mean(diff ** 2, axis=1)
        loss = float(sample_weights @ per_graph)
        delta = (2.0 / out.shape[1]) * sample_weights[:, None] * diff * out * (1.0 - out)
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return loss, gw, gb


def train_structure_decoder(params: ModelParams, aux: Sequence[Graph],
                            victims: Sequence[LeakedEmbedding], cfg: AttackConfig,
                            rng: np.random.Generator, max_nodes: int | None = None) -> StructureDecoder:
    """Fit the decoder on auxiliary graphs encoded by the frozen model."""
    if not aux:
        raise ConfigError("structure decoder needs at least one auxiliary graph")
    max_nodes = max_nodes or max(g.node_count for g in aux)
    if any(g.node_count > max_nodes for g in aux):
        raise ConfigError("auxiliary graph larger than decoder output size")
    aux_emb = encode_graphs(params, aux)
    vic_emb = np.stack([v.pooled for v in victims]) if victims else np.zeros((0, aux_emb.shape[1]))
    targets = np.stack([padded_adjacency(g, max_nodes).ravel() for g in aux])

    mean = aux_emb.mean(axis=0)
    scale = aux_emb.std(axis=0)
    scale[scale < 1e-8] = 1.0
    dec = StructureDecoder.init(aux_emb.shape[1], max_nodes, cfg.hidden, rng, mean, scale)

    strength = cfg.mmd_weight if cfg.adapter else 0.0
    weights = adapter_weights(aux_emb, vic_emb, strength)
    adapt = mmd(aux_emb, vic_emb) if len(vic_emb) else 0.0

    state = AdamState.zeros_like(dec.weights + dec.biases)
    n_layers = len(dec.weights)
    recon = float("nan")
    for epoch in range(cfg.epochs):
        recon, gw, gb = dec.loss_and_grads(aux_emb, targets, weights)
        new, state = adam_step(dec.weights + dec.biases, gw + gb, state, lr=cfg.lr)
        dec.weights, dec.biases = new[:n_layers], new[n_layers:]
    if cfg.epochs:
        recon = dec.loss_and_grads(aux_emb, targets, weights)[0]
    dec.history.append({
        "epochs": cfg.epochs,
        "recon_loss": recon,
        "mmd": adapt,
        "total_loss": recon + cfg.mmd_weight * adapt,
        "adapter": bool(cfg.adapter),
    })
    return dec


def recover_structure(decoder: StructureDecoder, leaked: LeakedEmbedding | np.ndarray,
                      node_count: int, cfg: AttackConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Crop, symmetrize and threshold the decoded adjacency.

    Returns ``(edge_probabilities, adjacency_hat)`` for ``node_count`` nodes.
    """
    cfg = cfg or AttackConfig()
    if node_count > decoder.max_nodes:
        raise ConfigError(f"{node_count} nodes exceed decoder capacity {decoder.max_nodes}")
    emb = leaked.pooled if isinstance(leaked, LeakedEmbedding) else leaked
    raw = decoder.predict(emb)[0]
    return crop_probabilities(raw, node_count, cfg.edge_threshold)


def crop_probabilities(raw: np.ndarray, node_count: int, threshold: float = 0.5):
    p = raw[:node_count, :node_count]
    probs = (p + p.T) / 2.0
    np.fill_diagonal(probs, 0.0)
    return probs, threshold_adjacency(probs, threshold)


def infer_node_count(decoder: StructureDecoder, leaked: LeakedEmbedding | np.ndarray,
                     floor: float = 0.2) -> int:
    """Heuristic count: drop trailing nodes whose best symmetrized edge score is below ``floor``."""
    emb = leaked.pooled if isinstance(leaked, LeakedEmbedding) else leaked
    raw = decoder.predict(emb)[0]
    probs = (raw + raw.T) / 2.0
    np.fill_diagonal(probs, 0.0)
    best = probs.max(axis=1)
    n = decoder.max_nodes
    while n > 1 and best[n - 1] < floor:
        n -= 1
    return n
