"""Command line: ``prepare``, ``train``, ``attack`` and ``verify``.

Every command accepts ``--config FILE`` (YAML mapping of option names to
values); explicit flags override the file. Relative output paths resolve
against ``$FGLLEAK_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O or format error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, FormatError, IntegrityError
from .federation import DefenseConfig, FederationConfig, load_transcripts, run_federation, save_transcripts
from .graph import (
    AuxiliarySpec,
    DatasetPartition,
    bfs_order,
    dataset_digest,
    generate_auxiliary,
    parse_tu_dataset,
    partition_dirichlet,
    relabel,
    write_tu_dataset,
)
from .leakage import AttackConfig
from .metrics import CONVENTION
from .nn import PoolingDescriptor, init_params, load_params, save_params
from .pipeline import rows_to_csv, run_attack, summarize

log = logging.getLogger("fglleak")

OUTPUT_ROOT_ENV = "FGLLEAK_OUTPUT_ROOT"
MANIFEST_VERSION = 1
EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _json_dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolved(args: argparse.Namespace, drop=("func", "config", "command")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    out = out_path(args.out)
    if bool(args.tu) == bool(args.synthetic):
        raise ConfigError("give exactly one of --tu DIR or --synthetic er:P")
    if args.tu:
        src = Path(args.tu)
        name = args.name or src.name
        graphs = parse_tu_dataset(src, name)
        if args.max_nodes:
            graphs = [g for g in graphs if g.node_count <= args.max_nodes]
    else:
        model, _, p = args.synthetic.partition(":")
        if model != "er":
            raise ConfigError(f"unknown synthetic model {model!r}; expected er:P")
        name = args.name or "synthetic"
        spec = AuxiliarySpec("erdos-renyi", "onehot", args.count, args.max_nodes or 28, p=float(p),
                             feature_dim=args.feature_dim, classes=args.classes)
        graphs = generate_auxiliary(spec, np.random.default_rng([args.seed, 0]))
    if args.order == "bfs":
        graphs = [relabel(g, bfs_order(g.adjacency)) for g in graphs]
    if not graphs:
        raise ConfigError("dataset is empty after filtering")

    part = partition_dirichlet(graphs, args.clients, args.alpha, args.seed)
    data_dir = out / "data"
    write_tu_dataset(graphs, data_dir, name)
    manifest = {
        "version": MANIFEST_VERSION,
        "config": _resolved(args, drop=("func", "config", "command", "out")),
        "dataset": {
            "name": name,
            "path": "data",
            "graphs": len(graphs),
            "feature_dim": graphs[0].feature_dim,
            "classes": len({g.label for g in graphs}),
            "max_nodes": max(g.node_count for g in graphs),
            "sha256": dataset_digest(graphs),
        },
        "partition": {"alpha": part.alpha, "clients": [list(c) for c in part.client_assignments]},
    }
    _json_dump(manifest, out / "manifest.json")
    digest = hashlib.sha256((out / "manifest.json").read_bytes()).hexdigest()
    print(f"wrote {out / 'manifest.json'}: {len(graphs)} graphs, clients {part.sizes()}, sha256 {digest[:16]}")
    return EXIT_OK


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version")
    ds = manifest["dataset"]
    graphs = parse_tu_dataset(path.parent / ds["path"], ds["name"])
    if dataset_digest(graphs) != ds["sha256"]:
        raise IntegrityError(f"{path}: dataset contents do not match the manifest digest")
    part = DatasetPartition(tuple(tuple(c) for c in manifest["partition"]["clients"]),
                            manifest["partition"]["alpha"])
    return manifest, graphs, part


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    manifest, graphs, part = load_manifest(args.manifest)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fed = FederationConfig(part.client_count, args.rounds, args.batch_size, args.lr, args.seed)
    defense = DefenseConfig.parse(args.defense)
    classes = max(g.label for g in graphs) + 1
    params = init_params(graphs[0].feature_dim, args.hidden, args.layers, classes,
                         np.random.default_rng([args.seed, 7]),
                         PoolingDescriptor(args.pooling, args.max_pool_k))
    save_params(params, out / "model_init.json")
    if args.rounds == 0:
        log.warning("--rounds 0: no transcripts recorded")
    transcripts, final = run_federation(graphs, part, fed, defense, params)
    save_transcripts(transcripts, out)
    save_params(final, out / "model_final.json")
    _json_dump({"manifest": str(Path(args.manifest)), "manifest_sha256": manifest["dataset"]["sha256"],
                **_resolved(args, drop=("func", "config", "command", "out", "manifest"))},
               out / "config.json")
    print(f"wrote {len(transcripts)} round transcript(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack


def _auxiliaries(args, manifest, graphs, part, victim: int):
    aux_kind, _, aux_arg = args.aux.partition(":")
    if aux_kind == "client":
        k = int(aux_arg) if aux_arg else (1 if victim == 0 else 0)
        if not 0 <= k < part.client_count:
            raise ConfigError(f"auxiliary client {k} does not exist")
        if k == victim:
            raise ConfigError("auxiliary client must differ from the victim")
        aux = [graphs[i] for i in part.client_assignments[k]]
    elif aux_kind == "er":
        local = [graphs[i] for c, ids in enumerate(part.client_assignments) if c != victim for i in ids]
        spec = AuxiliarySpec("erdos-renyi", args.aux_features, args.aux_count,
                             manifest["dataset"]["max_nodes"], p=float(aux_arg),
                             feature_dim=manifest["dataset"]["feature_dim"])
        aux = generate_auxiliary(spec, np.random.default_rng([args.seeds[0], 9]), source=local)
    else:
        raise ConfigError(f"unknown auxiliary source {args.aux!r}; use client:K or er:P")
    if not aux:
        raise ConfigError("no auxiliary graphs available for the structure decoder")
    return aux


def _transcripts_digest(directory) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(directory).glob("round_*.json")):
        h.update(p.read_bytes())
    return h.hexdigest()


def cmd_attack(args) -> int:
    manifest, graphs, part = load_manifest(args.manifest)
    transcripts = load_transcripts(args.transcripts)
    if not transcripts:
        raise ConfigError(f"no round transcripts in {args.transcripts}; run train with --rounds >= 1")
    by_round = {t.round_index: t for t in transcripts}
    if args.round not in by_round:
        raise ConfigError(f"round {args.round} not recorded (have {sorted(by_round)})")
    params = by_round[args.round].params_before
    if not 0 <= args.victim < part.client_count:
        raise ConfigError(f"victim client {args.victim} does not exist")
    victim_ids = list(part.client_assignments[args.victim])[: args.max_victims or None]
    victims = [graphs[i] for i in victim_ids]
    aux = _auxiliaries(args, manifest, graphs, part, args.victim)

    defenses = [DefenseConfig.parse(d) for d in (args.defense or ["none"])]
    rows = []
    for defense in defenses:
        for seed in args.seeds:
            base_cfg = dict(mmd_weight=args.mmd_weight, lr=args.decoder_lr, epochs=args.epochs,
                            edge_threshold=args.threshold,
                            assume_known_node_count=not args.unknown_node_count)
            arms = [("graphdlg", True)]
            if args.ablate_adapter:
                arms.append(("graphdlg-no-adapter", False))
            for label, adapter in arms:
                part_rows = run_attack(params, victims, aux, AttackConfig(adapter=adapter, **base_cfg),
                                       defense, seed, victim_ids=victim_ids, batch_size=args.batch_size,
                                       baseline=args.baseline == "random" and adapter,
                                       workers=args.workers, max_nodes=manifest["dataset"]["max_nodes"])
                for r in part_rows:
                    if r["method"] == "graphdlg":
                        r["method"] = label
                rows.extend(part_rows)

    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # paths and worker count do not affect results; digests pin the inputs instead
    experiment = _resolved(args, drop=("func", "config", "command", "out", "workers", "figures",
                                       "manifest", "transcripts", "verbose"))
    experiment["dataset_sha256"] = manifest["dataset"]["sha256"]
    experiment["transcripts_sha256"] = _transcripts_digest(args.transcripts)
    header = f"{CONVENTION}\nconfig: {json.dumps(experiment, sort_keys=True)}"
    (out / "metrics.csv").write_text(rows_to_csv(rows, header))
    summary = summarize(rows)
    _json_dump({"version": __version__, "conventions": CONVENTION, "config": experiment,
                "runtime": {"workers": args.workers}, "seeds": args.seeds,
                "attacked_round": args.round, "aggregate": summary}, out / "summary.json")
    if args.figures:
        from .plotting import plot_defense_sweep, plot_metric_distributions

        plot_metric_distributions(rows, out / "figures" / "metric_distributions.png")
        plot_defense_sweep(summary, out / "figures" / "defense_sweep.png")
    for s in summary:
        m = s["mean"]
        print(f"{s['defense']:<28} {s['method']:<20} mse={m['feature_mse']:.4f} acc={m['feature_acc']:.4f} "
              f"auc={m['structure_auc']:.4f} ap={m['structure_ap']:.4f} edge_acc={m['edge_acc']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(quick=args.quick)
    print("check\tstatus\tseconds\tdetail")
    for r in results:
        print(f"{r.name}\t{'PASS' if r.passed else 'FAIL'}\t{r.seconds:.2f}\t{r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fglleak", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest or synthesize a dataset and partition it")
    p.add_argument("--config")
    p.add_argument("--tu", help="directory holding a TU-format dataset")
    p.add_argument("--name", help="dataset file prefix (defaults to the directory name)")
    p.add_argument("--synthetic", help="synthetic structure model, e.g. er:0.1")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--max-nodes", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=8, help="one-hot node classes (synthetic)")
    p.add_argument("--classes", type=int, default=2, help="graph classes (synthetic)")
    p.add_argument("--order", choices=("native", "bfs"), default="native",
                   help="node ordering written to disk")
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="prepared")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="simulate federated rounds and record transcripts")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--pooling", choices=("sum", "mean", "max"), default="sum")
    p.add_argument("--max-pool-k", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--defense", default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="recover victim graphs from recorded gradients")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--transcripts", required=True)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--victim", type=int, default=0)
    p.add_argument("--max-victims", type=int, default=0, help="attack only the first N graphs (0 = all)")
    p.add_argument("--aux", default="client", help="client[:K] or er:P")
    p.add_argument("--aux-features", choices=("gaussian", "uniform", "dataset", "onehot"), default="gaussian")
    p.add_argument("--aux-count", type=int, default=200)
    p.add_argument("--defense", action="append", help="repeat to sweep, e.g. dp-gradients:0.1")
    p.add_argument("--baseline", choices=("none", "random"), default="none")
    p.add_argument("--ablate-adapter", action="store_true", help="also run without the MMD adapter")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--mmd-weight", "--lambda", dest="mmd_weight", type=float, default=0.2)
    p.add_argument("--decoder-lr", type=float, default=1e-3)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--unknown-node-count", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", default="attack")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="run the property and oracle checks")
    p.add_argument("--config")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise FormatError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: expected a mapping")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(k.replace("-", "_") for k in cfg) - known
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
        subparser.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, IntegrityError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
