"""End-to-end attack runs over a victim's graphs.

For one seed and one defense: regenerate the victim's shared gradients at
the attacked round's parameters, divide out every pooled embedding, fit one
structure decoder on the auxiliaries, then recover each graph's structure and
features. Per-graph jobs run on a thread pool; results come back in job
order so output is identical for any worker count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import StructureDecoder, infer_node_count, recover_structure, train_structure_decoder
from .errors import LeakageUnavailableError, RecoveryDegenerateError
from .federation import DefenseConfig, client_update
from .graph import Graph
from .leakage import AttackConfig, LeakedEmbedding, extract_embedding, gnfr, random_baseline
from .metrics import RecoveryMetrics, evaluate
from .nn import GradientBundle, ModelParams

METRIC_FIELDS = ("feature_mse", "feature_acc", "structure_auc", "structure_ap", "edge_acc")
CSV_FIELDS = ("seed", "defense", "method", "graph", "node_count", "status", *METRIC_FIELDS)


@dataclass
class VictimJob:
    index: int
    graphs: list[int]
    bundle: GradientBundle
    leaked: LeakedEmbedding | None
    status: str


def victim_bundles(params: ModelParams, victims: Sequence[Graph], victim_ids: Sequence[int],
                   defense: DefenseConfig, seed: int, batch_size: int = 1) -> list[VictimJob]:
    """Gradients the victim would share, one bundle per batch of consecutive graphs."""
    jobs = []
    for start in range(0, len(victims), batch_size):
        batch = list(range(start, min(start + batch_size, len(victims))))
        rng = np.random.default_rng([seed, 1, start])
        bundle = client_update(params, [victims[i] for i in batch], defense, rng)
        try:
            leaked, status = extract_embedding(bundle, {"graph": victim_ids[start]}), "ok"
        except LeakageUnavailableError:
            leaked, status = None, "leakage-unavailable"
        jobs.append(VictimJob(start, [victim_ids[i] for i in batch], bundle, leaked, status))
    return jobs


def _attack_one(job: VictimJob, target: Graph, params: ModelParams, decoder: StructureDecoder,
                fallback_embedding: np.ndarray, cfg: AttackConfig):
    emb = job.leaked.pooled if job.leaked is not None else fallback_embedding
    status = job.status
    if cfg.assume_known_node_count:
        n = target.node_count
    else:
        n = max(1, min(infer_node_count(decoder, emb), decoder.max_nodes))
    probs, a_hat = recover_structure(decoder, emb, n, cfg)
    try:
        rec = gnfr(params, job.bundle, a_hat, n, cfg)
        x_hat = rec.features_hat
    except RecoveryDegenerateError:
        x_hat = np.zeros((n, params.input_dim))
        status = "recovery-degenerate" if status == "ok" else status
    return _score(target, x_hat, probs, a_hat), status


def _score(target: Graph, x_hat, probs, a_hat) -> RecoveryMetrics:
    n_true, n_hat = target.node_count, x_hat.shape[0]
    if n_hat != n_true:
        # unknown-count mode: pad/crop the estimate to the true size
        n = n_true
        x = np.zeros((n, x_hat.shape[1]))
        p = np.zeros((n, n))
        a = np.zeros((n, n))
        m = min(n, n_hat)
        x[:m] = x_hat[:m]
        p[:m, :m] = probs[:m, :m]
        a[:m, :m] = a_hat[:m, :m]
        x_hat, probs, a_hat = x, p, a
    return evaluate(target.node_features, target.adjacency, x_hat, probs, a_hat)


def run_attack(params: ModelParams, victims: Sequence[Graph], aux: Sequence[Graph],
               cfg: AttackConfig, defense: DefenseConfig, seed: int, *,
               victim_ids: Sequence[int] | None = None, batch_size: int = 1,
               baseline: bool = False, workers: int = 1, max_nodes: int | None = None) -> list[dict]:
    """Attack every victim graph once; returns one row dict per (graph, method)."""
    victim_ids = list(range(len(victims))) if victim_ids is None else list(victim_ids)
    jobs = victim_bundles(params, victims, victim_ids, defense, seed, batch_size)
    leaked = [j.leaked for j in jobs if j.leaked is not None]
    cap = max_nodes or max(max(g.node_count for g in victims), max(g.node_count for g in aux))
    aux_fit = [g for g in aux if g.node_count <= cap]
    decoder = train_structure_decoder(params, aux_fit, leaked, cfg,
                                      np.random.default_rng([seed, 2]), max_nodes=cap)
    fallback = decoder.input_mean

    def work(job: VictimJob):
        target = victims[job.index]
        metrics, status = _attack_one(job, target, params, decoder, fallback, cfg)
        rows = [_row(seed, defense, "graphdlg", job.graphs[0], target.node_count, status, metrics)]
        if baseline:
            rec = random_baseline(target.node_count, params.input_dim,
                                  np.random.default_rng([seed, 3, job.index]), cfg.edge_threshold)
            m = evaluate(target.node_features, target.adjacency, rec.features_hat,
                         rec.edge_probabilities, rec.adjacency_hat)
            rows.append(_row(seed, defense, "random", job.graphs[0], target.node_count, "ok", m))
        return rows

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    return [row for rows in results for row in rows]


def _row(seed, defense: DefenseConfig, method, graph, n, status, m: RecoveryMetrics) -> dict:
    return {"seed": seed, "defense": defense.tag, "method": method, "graph": graph,
            "node_count": n, "status": status, **m.as_dict()}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Unweighted per-(defense, method) means; seed means first, then over seeds."""
    groups: dict[tuple, dict[int, list[dict]]] = {}
    for r in rows:
        groups.setdefault((r["defense"], r["method"]), {}).setdefault(r["seed"], []).append(r)
    out = []
    for (defense, method), by_seed in groups.items():
        per_seed = {}
        for seed, rs in sorted(by_seed.items()):
            per_seed[seed] = {k: _nanmean([r[k] for r in rs]) for k in METRIC_FIELDS}
        mean = {k: _nanmean([v[k] for v in per_seed.values()]) for k in METRIC_FIELDS}
        out.append({"defense": defense, "method": method, "graphs": len(next(iter(by_seed.values()))),
                    "seeds": sorted(by_seed), "mean": mean,
                    "per_seed": {str(s): v for s, v in per_seed.items()}})
    return out


def _nanmean(values) -> float:
    vals = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else float("nan")
