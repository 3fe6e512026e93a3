"""In-process federated training rounds with optional gradient defenses.

Each round every client draws a batch from its private graphs, computes one
mean gradient at the current global parameters, applies its defense, and
ships the bundle. The server averages bundles weighted by ``N_i / N`` and
takes a plain gradient step. Everything an eavesdropper would observe is kept
in a :class:`RoundTranscript`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .graph import DatasetPartition, Graph
from .nn import (
    GradientBundle,
    ModelParams,
    average_batch,
    backward_analytic,
    bundle_from_dict,
    bundle_to_dict,
    forward,
    params_from_dict,
    params_to_dict,
)

DEFENSE_KINDS = ("none", "gradient-compression", "dp-gradients", "dp-activations", "dp-hybrid")


@dataclass(frozen=True)
class DefenseConfig:
    """One active defense.

    ``prune_ratio`` applies to gradient compression; ``noise_scale`` is the
    Laplace scale ``b`` for the DP variants (the hybrid uses ``b/2`` on both
    gradients and activations).
    """

    kind: str = "none"
    prune_ratio: float = 0.0
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}")
        if self.kind == "gradient-compression" and not 0.0 <= self.prune_ratio < 1.0:
            raise ConfigError("prune ratio must lie in [0, 1)")
        if self.kind.startswith("dp-") and not self.noise_scale >= 0.0:
            raise ConfigError("noise scale must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "DefenseConfig":
        """Parse ``none``, ``gradient-compression:0.9`` or ``dp-gradients:0.1`` style specs."""
        kind, _, arg = text.strip().partition(":")
        if kind == "none":
            return cls()
        if kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {kind!r}")
        try:
            val = float(arg)
        except ValueError:
            raise ConfigError(f"defense {kind!r} needs a numeric parameter, got {arg!r}") from None
        if kind == "gradient-compression":
            return cls(kind, prune_ratio=val)
        return cls(kind, noise_scale=val)

    @property
    def tag(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "gradient-compression":
            return f"gradient-compression:{self.prune_ratio:g}"
        return f"{self.kind}:{self.noise_scale:g}"

    @property
    def gradient_noise(self) -> float:
        return {"dp-gradients": self.noise_scale, "dp-hybrid": self.noise_scale / 2}.get(self.kind, 0.0)

    @property
    def activation_noise(self) -> float:
        return {"dp-activations": self.noise_scale, "dp-hybrid": self.noise_scale / 2}.get(self.kind, 0.0)


@dataclass(frozen=True)
class FederationConfig:
    client_count: int = 2
    rounds: int = 1
    batch_size: int = 1
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.client_count < 1:
            raise ConfigError("client_count must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")


def apply_gradient_compression(bundle: GradientBundle, p: float) -> GradientBundle:
    """Zero the ``ceil(p * n)`` smallest-magnitude entries across the whole bundle.

    Among equal magnitudes the later flat index is pruned first.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError("prune ratio must lie in [0, 1)")
    flat = bundle.flat()
    k = math.ceil(p * flat.size - 1e-9)
    if k <= 0:
        return bundle.from_flat(flat)
    order = np.lexsort((-np.arange(flat.size), np.abs(flat)))
    flat = flat.copy()
    flat[order[:k]] = 0.0
    return bundle.from_flat(flat)


def add_laplace_noise(bundle: GradientBundle, scale: float, rng: np.random.Generator) -> GradientBundle:
    if scale == 0:
        return bundle.from_flat(bundle.flat())
    flat = bundle.flat()
    return bundle.from_flat(flat + rng.laplace(0.0, scale, size=flat.size))


def client_update(params: ModelParams, graphs: Sequence[Graph], defense: DefenseConfig,
                  rng: np.random.Generator) -> GradientBundle:
    """Mean gradient over ``graphs`` with ``defense`` applied."""
    if not graphs:
        raise ConfigError("client batch is empty")
    act_scale = defense.activation_noise
    noise = None
    if act_scale > 0:
        def noise(shape):
            return rng.laplace(0.0, act_scale, size=shape)
    bundles = []
    for g in graphs:
        trace = forward(params, g, activation_noise=noise)
        bundles.append(backward_analytic(trace, params, g))
    out = average_batch(bundles)
    if defense.kind == "gradient-compression":
        out = apply_gradient_compression(out, defense.prune_ratio)
    elif defense.gradient_noise > 0:
        out = add_laplace_noise(out, defense.gradient_noise, rng)
    out.defense_tag = defense.tag
    return out


def aggregate(bundles: Sequence[GradientBundle], weights: Sequence[float], params: ModelParams,
              lr: float) -> ModelParams:
    """``W - lr * sum_i w_i grad_i`` accumulated in client order."""
    weights = [float(w) for w in weights]
    if len(weights) != len(bundles) or not bundles:
        raise ConfigError("need one weight per bundle")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ConfigError(f"aggregation weights sum to {sum(weights)!r}, not 1")
    total = [np.zeros_like(a) for a in params.arrays()]
    for w, b in zip(weights, bundles):
        for acc, g in zip(total, b.arrays()):
            acc += w * g
    return params.with_arrays([p - lr * t for p, t in zip(params.arrays(), total)])


@dataclass
class RoundTranscript:
    round_index: int
    params_before: ModelParams
    params_after: ModelParams
    client_bundles: list[GradientBundle]
    client_weights: list[float]
    # ground truth for evaluation only; not part of the eavesdropper's view
    batch_indices: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "params_before": params_to_dict(self.params_before),
            "params_after": params_to_dict(self.params_after),
            "client_weights": [float(w).hex() for w in self.client_weights],
            "batch_indices": self.batch_indices,
            "bundles": [bundle_to_dict(b) for b in self.client_bundles],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RoundTranscript":
        return cls(
            int(obj["round"]),
            params_from_dict(obj["params_before"]),
            params_from_dict(obj["params_after"]),
            [bundle_from_dict(b) for b in obj["bundles"]],
            [float.fromhex(w) for w in obj["client_weights"]],
            [list(map(int, b)) for b in obj["batch_indices"]],
        )


def client_rng(seed: int, round_index: int, client: int) -> np.random.Generator:
    """Independent stream per (seed, round, client), stable under any scheduling."""
    return np.random.default_rng([seed, round_index, client])


def run_federation(graphs: Sequence[Graph], partition: DatasetPartition, config: FederationConfig,
                   defense: DefenseConfig, params: ModelParams) -> tuple[list[RoundTranscript], ModelParams]:
    if partition.client_count != config.client_count:
        raise ConfigError(
            f"partition has {partition.client_count} clients, config expects {config.client_count}"
        )
    sizes = partition.sizes()
    total = sum(sizes)
    weights = [n / total for n in sizes]
    # exact float weights can sum to 1 +- 1 ulp; fold the residue into the last
    weights[-1] = 1.0 - sum(weights[:-1])

    transcripts = []
    for r in range(config.rounds):
        bundles, batches = [], []
        for c, assigned in enumerate(partition.client_assignments):
            rng = client_rng(config.seed, r, c)
            take = min(config.batch_size, len(assigned))
            batch = sorted(int(i) for i in rng.choice(assigned, size=take, replace=False))
            bundles.append(client_update(params, [graphs[i] for i in batch], defense, rng))
            batches.append(batch)
        new_params = aggregate(bundles, weights, params, config.lr)
        transcripts.append(RoundTranscript(r, params, new_params, bundles, weights, batches))
        params = new_params
    return transcripts, params


def save_transcripts(transcripts: Sequence[RoundTranscript], directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in transcripts:
        p = d / f"round_{t.round_index:04d}.json"
        with p.open("w") as fh:
            json.dump(t.to_dict(), fh)
            fh.write("\n")
        paths.append(p)
    return paths


def load_transcripts(directory) -> list[RoundTranscript]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"transcript directory {d} does not exist")
    out = []
    for p in sorted(d.glob("round_*.json")):
        try:
            out.append(RoundTranscript.from_dict(json.loads(p.read_text())))
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"cannot read transcript {p}: {exc}") from exc
    return out
