"""Dense GCN graph classifier with an analytic backward pass.

The model is ``H_i = relu(Abar H_{i-1} W_i)`` for ``i = 1..l`` with
``H_0 = X``, a pooling readout ``H_G = Pool(H_l)``, a linear classifier
``logits = W_fc H_G + W_b`` and softmax cross-entropy. Gradients of the GCN
weights are computed with the coefficient recursion

    r_l = Abar^T (dPool^T(dL/dlogits W_fc) * relu'(Z_l))
    r_i = Abar^T (r_{i+1} W_{i+1}^T * relu'(Z_i))
    dL/dW_i = H_{i-1}^T r_i

rather than a generic autodiff engine. Everything is float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .graph import Graph, normalize_adjacency

CHECKPOINT_VERSION = 1
DEFAULT_MAX_POOL_K = 50

# Mutation hook for negative-control runs of the verifier.
MUTATION_ENV = "FGLLEAK_MUTATION"


@dataclass(frozen=True)
class PoolingDescriptor:
    kind: str = "sum"
    k: int = DEFAULT_MAX_POOL_K

    def __post_init__(self):
        if self.kind not in ("sum", "mean", "max"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("max-pooling sharpness K must be positive")

    def matrix(self, n: int) -> np.ndarray:
        """Row vector ``M_p`` for the linear poolings (1 x n)."""
        if self.kind == "sum":
            return np.ones((1, n))
        if self.kind == "mean":
            return np.full((1, n), 1.0 / n)
        raise ValueError("max pooling has no constant pooling matrix")

    def pool(self, h: np.ndarray) -> np.ndarray:
        if self.kind == "max":
            kh = self.k * h
            top = kh.max(axis=0)
            return (top + np.log(np.exp(kh - top).sum(axis=0))) / self.k
        return (self.matrix(h.shape[0]) @ h)[0]

    def jacobian_weights(self, h: np.ndarray) -> np.ndarray:
        """``dH_G[j] / dH[v, j]`` as an ``n x d`` matrix."""
        n = h.shape[0]
        if self.kind == "max":
            kh = self.k * h
            e = np.exp(kh - kh.max(axis=0))
            return e / e.sum(axis=0)
        return np.repeat(self.matrix(n).T, h.shape[1], axis=1)


@dataclass
class ModelParams:
    gcn_weights: list[np.ndarray]
    fc: np.ndarray
    bias: np.ndarray
    pooling: PoolingDescriptor = field(default_factory=PoolingDescriptor)

    def __post_init__(self):
        self.gcn_weights = [np.asarray(w, dtype=np.float64) for w in self.gcn_weights]
        self.fc = np.asarray(self.fc, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if not self.gcn_weights:
            raise ShapeError("model needs at least one GCN layer")
        for a, b in zip(self.gcn_weights, self.gcn_weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"GCN layer dims do not chain: {a.shape} -> {b.shape}")
        if self.fc.shape[1] != self.gcn_weights[-1].shape[1]:
            raise ShapeError("classifier width must equal the last GCN hidden size")
        if self.bias.shape[0] != self.fc.shape[0]:
            raise ShapeError("bias length must equal the number of classes")

    @property
    def layers(self) -> int:
        return len(self.gcn_weights)

    @property
    def classes(self) -> int:
        return self.fc.shape[0]

    @property
    def input_dim(self) -> int:
        return self.gcn_weights[0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.fc.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [*self.gcn_weights, self.fc, self.bias]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        l = self.layers
        return replace(self, gcn_weights=list(arrays[:l]), fc=arrays[l], bias=arrays[l + 1])

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_params(input_dim: int, hidden: int | Sequence[int], layers: int, classes: int,
                rng: np.random.Generator, pooling: PoolingDescriptor | None = None) -> ModelParams:
    """Glorot-uniform GCN weights, uniform fan-in classifier, zero bias."""
    dims = list(hidden) if not isinstance(hidden, int) else [hidden] * layers
    if len(dims) != layers:
        raise ShapeError("hidden sizes must give one entry per layer")
    sizes = [input_dim, *dims]
    ws = []
    for a, b in zip(sizes, sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        ws.append(rng.uniform(-lim, lim, size=(a, b)))
    lim = 1.0 / np.sqrt(sizes[-1])
    fc = rng.uniform(-lim, lim, size=(classes, sizes[-1]))
    return ModelParams(ws, fc, np.zeros(classes), pooling or PoolingDescriptor())


@dataclass
class ForwardTrace:
    abar: np.ndarray
    pre_activations: list[np.ndarray]   # Z_1..Z_l
    activations: list[np.ndarray]       # H_0..H_l, H_0 = X
    relu_masks: list[np.ndarray]        # 1 where Z_i > 0
    pooled: np.ndarray                  # H_G, length d_l
    logits: np.ndarray
    probs: np.ndarray
    loss: float
    label: int

    @property
    def logit_grad(self) -> np.ndarray:
        onehot = np.zeros_like(self.probs)
        onehot[self.label] = 1.0
        return self.probs - onehot


def log_softmax(z: np.ndarray) -> np.ndarray:
    top = z.max()
    return z - top - np.log(np.exp(z - top).sum())


def forward(params: ModelParams, g: Graph, label: int | None = None,
            activation_noise: Callable[[tuple], np.ndarray] | None = None,
            abar: np.ndarray | None = None) -> ForwardTrace:
    """Run the model on ``g``.

    ``activation_noise(shape)`` is added to every GCN layer output after the
    ReLU when given (activation-perturbation defense). ``label`` defaults to
    the graph's own label.
    """
    x = g.node_features
    if x.shape[1] != params.input_dim:
        raise ShapeError(f"feature dim {x.shape[1]} != model input dim {params.input_dim}")
    y = g.label if label is None else int(label)
    if not 0 <= y < params.classes:
        raise ShapeError(f"label {y} outside {params.classes} classes")
    if abar is None:
        abar = normalize_adjacency(g).matrix

    hs, zs, masks = [x], [], []
    h = x
    for w in params.gcn_weights:
        z = abar @ h @ w
        h = np.maximum(z, 0.0)
        if activation_noise is not None:
            h = h + activation_noise(h.shape)
        zs.append(z)
        masks.append((z > 0).astype(np.float64))
        hs.append(h)
    pooled = params.pooling.pool(h)
    logits = params.fc @ pooled + params.bias
    logp = log_softmax(logits)
    return ForwardTrace(abar, zs, hs, masks, pooled, logits, np.exp(logp), float(-logp[y]), y)


@dataclass
class GradientBundle:
    grad_gcn: list[np.ndarray]
    grad_fc: np.ndarray
    grad_b: np.ndarray
    batch_size: int = 1
    defense_tag: str = "none"

    def arrays(self) -> list[np.ndarray]:
        return [*self.grad_gcn, self.grad_fc, self.grad_b]

    def with_arrays(self, arrays: Sequence[np.ndarray], **changes) -> "GradientBundle":
        l = len(self.grad_gcn)
        return replace(self, grad_gcn=[np.asarray(a) for a in arrays[:l]],
                       grad_fc=np.asarray(arrays[l]), grad_b=np.asarray(arrays[l + 1]), **changes)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, flat: np.ndarray, **changes) -> "GradientBundle":
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self.with_arrays(out, **changes)

    def shapes(self) -> list[tuple]:
        return [a.shape for a in self.arrays()]


def backward_analytic(trace: ForwardTrace, params: ModelParams, g: Graph | None = None) -> GradientBundle:
    """Gradients of the trace's loss via the coefficient recursion."""
    flip = os.environ.get(MUTATION_ENV) == "flip-r-sign"
    dlogits = trace.logit_grad
    grad_fc = np.outer(dlogits, trace.pooled)
    grad_b = dlogits.copy()

    h_l = trace.activations[-1]
    dpool = params.pooling.jacobian_weights(h_l) * (dlogits @ params.fc)[None, :]
    abar_t = trace.abar.T
    l = params.layers
    grads: list[np.ndarray] = [None] * l  # type: ignore[list-item]
    r = abar_t @ (dpool * trace.relu_masks[-1])
    grads[l - 1] = trace.activations[l - 1].T @ r
    for i in range(l - 2, -1, -1):
        r = abar_t @ ((r @ params.gcn_weights[i + 1].T) * trace.relu_masks[i])
        if flip:
            r = -r
        grads[i] = trace.activations[i].T @ r
    return GradientBundle(grads, grad_fc, grad_b, 1, "none")


def loss_and_grad(params: ModelParams, g: Graph, label: int | None = None) -> tuple[float, GradientBundle]:
    trace = forward(params, g, label)
    return trace.loss, backward_analytic(trace, params, g)


def average_batch(bundles: Sequence[GradientBundle]) -> GradientBundle:
    """Element-wise mean of bundles; ``batch_size`` is the sum of the inputs."""
    if not bundles:
        raise ShapeError("cannot average an empty list of bundles")
    ref = bundles[0].shapes()
    for b in bundles[1:]:
        if b.shapes() != ref:
            raise ShapeError("gradient bundles differ in shape")
    n = len(bundles)
    arrays = [sum(b.arrays()[k] for b in bundles) / n for k in range(len(ref))]
    return bundles[0].with_arrays(arrays, batch_size=sum(b.batch_size for b in bundles))


def solve_min_norm(a: np.ndarray, b: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-Frobenius-norm least-squares solution of ``a @ x = b`` via SVD.

    Singular values below ``rcond * sigma_max`` are treated as zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    if a.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"incompatible system shapes {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite entries in linear system")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        x = np.zeros((a.shape[1], b.shape[1]))
    else:
        keep = s > rcond * s[0]
        x = vt[keep].T @ ((u[:, keep].T @ b) / s[keep][:, None])
    return x[:, 0] if vec else x


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Checkpoints: JSON with hex-encoded float64 so round trips are bit exact.


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "hex": [float(v).hex() for v in a.ravel()]}


def decode_array(obj: dict) -> np.ndarray:
    try:
        vals = [float.fromhex(h) for h in obj["hex"]]
        return np.asarray(vals, dtype=np.float64).reshape(obj["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed array record: {exc}") from exc


def params_to_dict(params: ModelParams) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "pooling": {"kind": params.pooling.kind, "k": params.pooling.k},
        "gcn_weights": [encode_array(w) for w in params.gcn_weights],
        "fc": encode_array(params.fc),
        "bias": encode_array(params.bias),
    }


def params_from_dict(obj: dict) -> ModelParams:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {obj.get('version')!r}")
    return ModelParams(
        [decode_array(w) for w in obj["gcn_weights"]],
        decode_array(obj["fc"]),
        decode_array(obj["bias"]),
        PoolingDescriptor(**obj["pooling"]),
    )


def bundle_to_dict(b: GradientBundle) -> dict:
    return {
        "batch_size": b.batch_size,
        "defense_tag": b.defense_tag,
        "grad_gcn": [encode_array(a) for a in b.grad_gcn],
        "grad_fc": encode_array(b.grad_fc),
        "grad_b": encode_array(b.grad_b),
    }


def bundle_from_dict(obj: dict) -> GradientBundle:
    return GradientBundle([decode_array(a) for a in obj["grad_gcn"]], decode_array(obj["grad_fc"]),
                          decode_array(obj["grad_b"]), int(obj["batch_size"]), obj["defense_tag"])


def save_params(params: ModelParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh, indent=1)
        fh.write("\n")


def load_params(path) -> ModelParams:
    try:
        with open(path) as fh:
            return params_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
