"""Graph data model, TUDataset ingestion, Dirichlet partitioning and
synthetic auxiliary-graph generation.

Node features are one-hot encoded node labels for TU datasets. All random
draws go through an explicit ``numpy.random.Generator``; nothing here touches
the global RNG.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """One private graph: features ``|V| x d``, symmetric 0/1 adjacency, label."""

    node_features: np.ndarray
    adjacency: np.ndarray
    label: int = 0

    def __post_init__(self):
        x = _frozen(self.node_features, np.float64)
        a = _frozen(self.adjacency, np.float64)
        if x.ndim != 2:
            raise IntegrityError(f"node_features must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        if n < 1:
            raise IntegrityError("a graph needs at least one node")
        if a.shape != (n, n):
            raise IntegrityError(f"adjacency shape {a.shape} does not match {n} nodes")
        if not np.all((a == 0) | (a == 1)):
            raise IntegrityError("adjacency entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise IntegrityError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise IntegrityError("adjacency must have a zero diagonal")
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "label", int(self.label))

    @property
    def node_count(self) -> int:
        return self.node_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def edge_count(self) -> int:
        return int(np.triu(self.adjacency, 1).sum())

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.adjacency, other.adjacency)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: np.ndarray
    degrees: np.ndarray = field(repr=False)

    @property
    def source_node_count(self) -> int:
        return self.matrix.shape[0]


def normalize_adjacency(g: Graph | np.ndarray) -> NormalizedAdjacency:
    """Return ``D^-1/2 (A + I) D^-1/2`` where ``D`` is the degree of ``A + I``."""
    a = g.adjacency if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)
    a_tilde = a + np.eye(a.shape[0])
    deg = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    m = a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]
    return NormalizedAdjacency(_frozen(m, np.float64), _frozen(deg, np.float64))


# ---------------------------------------------------------------------------
# TUDataset text format


def _read_ints(path: Path, sep: str | None = None) -> list[list[int]]:
    if not path.is_file():
        raise FormatError(f"missing dataset file: {path}")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(tok) for tok in (line.split(sep) if sep else line.split())])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return rows


def parse_tu_dataset(root_path: str | Path, dataset_name: str) -> list[Graph]:
    """Parse a TU-collection dataset into :class:`Graph` objects.

    Node labels are one-hot encoded with one column per distinct label value
    (sorted ascending). Duplicate and reversed edges collapse into a single
    undirected edge; self-loops in ``_A.txt`` are dropped.
    """
    root = Path(root_path)
    prefix = root / dataset_name
    edges = _read_ints(Path(f"{prefix}_A.txt"), ",")
    indicator = [r[0] for r in _read_ints(Path(f"{prefix}_graph_indicator.txt"))]
    graph_labels = [r[0] for r in _read_ints(Path(f"{prefix}_graph_labels.txt"))]
    node_labels = [r[0] for r in _read_ints(Path(f"{prefix}_node_labels.txt"))]

    n_nodes = len(indicator)
    if len(node_labels) != n_nodes:
        raise IntegrityError(
            f"{len(node_labels)} node labels for {n_nodes} nodes in graph_indicator"
        )
    graph_ids = sorted(set(indicator))
    if graph_ids != list(range(1, len(graph_ids) + 1)):
        raise IntegrityError("graph ids in graph_indicator are not contiguous from 1")
    if any(b < a for a, b in zip(indicator, indicator[1:])):
        raise IntegrityError("graph_indicator is not sorted by graph id")
    if len(graph_labels) != len(graph_ids):
        raise IntegrityError(
            f"{len(graph_labels)} graph labels for {len(graph_ids)} graphs"
        )

    label_values = sorted(set(node_labels))
    col = {v: i for i, v in enumerate(label_values)}
    # TU class labels are arbitrary integers (e.g. -1/1); map to 0..C-1
    class_values = sorted(set(graph_labels))
    cls = {v: i for i, v in enumerate(class_values)}

    ind = np.asarray(indicator)
    starts = np.searchsorted(ind, np.arange(1, len(graph_ids) + 1))
    ends = np.append(starts[1:], n_nodes)

    adj = [np.zeros((e - s, e - s)) for s, e in zip(starts, ends)]
    for lineno, row in enumerate(edges, 1):
        if len(row) != 2:
            raise FormatError(f"{prefix}_A.txt:{lineno}: expected 2 node ids, got {row}")
        u, v = row
        if not (1 <= u <= n_nodes and 1 <= v <= n_nodes):
            raise IntegrityError(f"{prefix}_A.txt:{lineno}: edge ({u},{v}) references unknown node")
        gu, gv = indicator[u - 1], indicator[v - 1]
        if gu != gv:
            raise IntegrityError(f"{prefix}_A.txt:{lineno}: edge ({u},{v}) crosses graphs")
        if u == v:
            continue
        s = starts[gu - 1]
        adj[gu - 1][u - 1 - s, v - 1 - s] = 1.0
        adj[gu - 1][v - 1 - s, u - 1 - s] = 1.0

    graphs = []
    for k, (s, e) in enumerate(zip(starts, ends)):
        x = np.zeros((e - s, len(label_values)))
        for i in range(s, e):
            x[i - s, col[node_labels[i]]] = 1.0
        graphs.append(Graph(x, adj[k], cls[graph_labels[k]]))
    return graphs


def write_tu_dataset(graphs: Sequence[Graph], root_path: str | Path, dataset_name: str) -> None:
    """Write one-hot-featured graphs back out in the TU text layout."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    prefix = root / dataset_name
    a_lines, ind_lines, nl_lines, gl_lines = [], [], [], []
    offset = 0
    for gid, g in enumerate(graphs, 1):
        x = g.node_features
        if not np.all((x.sum(axis=1) == 1) & ((x == 0) | (x == 1)).all(axis=1)):
            raise FormatError("TU export requires one-hot node features")
        for i in range(g.node_count):
            ind_lines.append(str(gid))
            nl_lines.append(str(int(np.argmax(x[i]))))
        for i, j in zip(*np.nonzero(g.adjacency)):
            a_lines.append(f"{offset + i + 1}, {offset + j + 1}")
        gl_lines.append(str(g.label))
        offset += g.node_count
    for suffix, lines in (("A", a_lines), ("graph_indicator", ind_lines),
                          ("node_labels", nl_lines), ("graph_labels", gl_lines)):
        Path(f"{prefix}_{suffix}.txt").write_text("".join(l + "\n" for l in lines))


def dataset_digest(graphs: Sequence[Graph]) -> str:
    h = hashlib.sha256()
    for g in graphs:
        h.update(np.int64(g.label).tobytes())
        h.update(np.asarray(g.node_features.shape, dtype=np.int64).tobytes())
        h.update(g.node_features.tobytes())
        h.update(g.adjacency.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Non-i.i.d. partitioning


@dataclass(frozen=True)
class DatasetPartition:
    client_assignments: tuple[tuple[int, ...], ...]
    alpha: float

    @property
    def client_count(self) -> int:
        return len(self.client_assignments)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.client_assignments]


def partition_dirichlet(graphs: Sequence[Graph], clients: int, alpha: float,
                        seed: int) -> DatasetPartition:
    """Split graphs across clients with per-class Dirichlet(alpha) proportions.

    Draws that leave a client empty are redrawn with ``seed + attempt``.
    """
    if clients < 1:
        raise ConfigError("clients must be >= 1")
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    if len(graphs) < clients:
        raise ConfigError(f"{len(graphs)} graphs cannot fill {clients} clients")

    labels = np.array([g.label for g in graphs])
    classes = np.unique(labels)
    for attempt in range(1000):
        rng = np.random.default_rng(seed + attempt)
        buckets: list[list[int]] = [[] for _ in range(clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(clients, alpha))
            cuts = (np.cumsum(props) * len(idx)).round().astype(int)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].extend(int(i) for i in part)
        if all(buckets):
            return DatasetPartition(tuple(tuple(sorted(b)) for b in buckets), float(alpha))
    raise ConfigError("could not draw a partition without empty clients in 1000 attempts")


# ---------------------------------------------------------------------------
# Synthetic auxiliaries


STRUCTURE_MODELS = ("dataset", "erdos-renyi")
FEATURE_MODELS = ("dataset", "gaussian", "uniform", "onehot")


@dataclass(frozen=True)
class AuxiliarySpec:
    """How to synthesize auxiliary graphs.

    ``structure_model`` is ``"erdos-renyi"`` (edge probability ``p``) or
    ``"dataset"`` (copy structures from a source dataset). ``feature_model``
    is ``"gaussian"`` (``mean``, ``var``), ``"uniform"`` (``lo``, ``hi``),
    ``"onehot"`` (``classes`` categories drawn uniformly) or ``"dataset"``.
    """

    structure_model: str = "erdos-renyi"
    feature_model: str = "gaussian"
    graph_count: int = 100
    max_nodes: int = 28
    p: float = 0.1
    mean: float = 0.0
    var: float = 1.0
    lo: float = -1.0
    hi: float = 1.0
    feature_dim: int = 7
    classes: int = 2

    def __post_init__(self):
        if self.structure_model not in STRUCTURE_MODELS:
            raise ConfigError(f"unknown structure model {self.structure_model!r}")
        if self.feature_model not in FEATURE_MODELS:
            raise ConfigError(f"unknown feature model {self.feature_model!r}")
        if self.graph_count < 1:
            raise ConfigError("graph_count must be >= 1")
        if self.max_nodes < 2:
            raise ConfigError("max_nodes must be >= 2")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"edge probability {self.p} outside [0, 1]")
        if self.var < 0 or self.hi < self.lo or self.feature_dim < 1 or self.classes < 1:
            raise ConfigError("invalid feature-model parameters")


def erdos_renyi_adjacency(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < p, 1)
    return (upper | upper.T).astype(np.float64)


def _features(spec: AuxiliarySpec, n: int, rng, pool: np.ndarray | None) -> np.ndarray:
    if spec.feature_model == "gaussian":
        return rng.normal(spec.mean, np.sqrt(spec.var), size=(n, spec.feature_dim))
    if spec.feature_model == "uniform":
        return rng.uniform(spec.lo, spec.hi, size=(n, spec.feature_dim))
    if spec.feature_model == "onehot":
        return np.eye(spec.feature_dim)[rng.integers(0, spec.feature_dim, size=n)]
    if pool is None or len(pool) == 0:
        raise ConfigError("dataset-drawn features need source graphs")
    return pool[rng.integers(0, len(pool), size=n)]


def generate_auxiliary(spec: AuxiliarySpec, seed: int | np.random.Generator,
                       source: Sequence[Graph] | None = None) -> list[Graph]:
    """Generate ``spec.graph_count`` graphs.

    Erdős–Rényi structures get node counts uniform on ``[2, max_nodes]``.
    Dataset-drawn structures are sampled (with replacement) from ``source``
    among graphs that fit in ``max_nodes``; dataset-drawn features are rows
    sampled from the pooled source feature matrix, or kept as-is when the
    structure is dataset-drawn too. Generated graphs get random labels in
    ``range(spec.classes)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = None
    if source:
        pool = np.concatenate([g.node_features for g in source])
    fitting = [g for g in (source or ()) if g.node_count <= spec.max_nodes]
    if spec.structure_model == "dataset" and not fitting:
        raise ConfigError("dataset-drawn structures need source graphs within max_nodes")

    out = []
    for _ in range(spec.graph_count):
        label = int(rng.integers(0, spec.classes))
        if spec.structure_model == "dataset":
            src = fitting[int(rng.integers(0, len(fitting)))]
            if spec.feature_model == "dataset":
                out.append(Graph(src.node_features, src.adjacency, label))
                continue
            adj = src.adjacency
        else:
            n = int(rng.integers(2, spec.max_nodes + 1))
            adj = erdos_renyi_adjacency(n, spec.p, rng)
        out.append(Graph(_features(spec, adj.shape[0], rng, pool), adj, label))
    return out


def bfs_order(adjacency: np.ndarray, start: int = 0) -> np.ndarray:
    """Breadth-first node order (ties by index); unreached components follow."""
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    order = []
    for root in [start] + list(range(n)):
        if seen[root]:
            continue
        seen[root] = True
        queue = [root]
        while queue:
            u = queue.pop(0)
            order.append(u)
            for v in np.flatnonzero(adjacency[u]):
                if not seen[v]:
                    seen[v] = True
                    queue.append(int(v))
    return np.asarray(order)


def relabel(g: Graph, order: np.ndarray) -> Graph:
    """Return ``g`` with node ``order[k]`` moved to position ``k``."""
    return Graph(g.node_features[order], g.adjacency[np.ix_(order, order)], g.label)
