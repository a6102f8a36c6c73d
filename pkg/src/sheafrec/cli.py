"""Command line interface.

Verbs: ``train``, ``evaluate``, ``sweep``, ``synth``, ``inspect-checkpoint``.
Flag values override config-file values, which override the built-in
defaults; ``SHEAFREC_SEED`` is the seed fallback when nothing else sets one.

Heavy imports happen inside the handlers so that ``--threads`` can pin the
BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags win")
    p.add_argument("--data", help="rating file path")
    p.add_argument("--format", choices=("movielens-1m", "tsv"), help="rating file format")
    p.add_argument("--seed", type=int, help="run seed (fallback: SHEAFREC_SEED, then 0)")
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--layers", type=int)
    p.add_argument("--node-stalk", type=int, dest="node_stalk")
    p.add_argument("--edge-stalk", type=int, dest="edge_stalk")
    p.add_argument("--loss", choices=("bpr", "rmse", "bce"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--k", dest="ks", help="comma-separated ranking cutoffs, e.g. 10,20")
    p.add_argument("--out", help="output directory")
    p.add_argument("--projection", choices=("off", "co-engagement"))
    p.add_argument("--bpr", choices=("pairwise", "summed"), help="BPR aggregation variant")
    p.add_argument("--threads", type=int, help="pin BLAS/OpenMP thread count")
    p.add_argument("--measure-time", action="store_true", default=None, dest="measure_time",
                   help="also record recommendation timing (timing.json)")
    p.add_argument("--split-manifest", action="store_true", default=None, dest="split_manifest",
                   help="write the per-record split assignment audit file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sheafrec",
                                     description="sheaf-diffusion collaborative filtering")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full train + evaluate pipeline")
    _add_experiment_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    _add_experiment_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.set_defaults(func=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    _add_experiment_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("latent_dim", "layers", "stalks", "loss"))
    p_sweep.add_argument("--values", required=True,
                         help="comma list; stalk pairs as NODExEDGE, e.g. 1x8,8x1,8x8")
    p_sweep.set_defaults(func=cmd_sweep)

    p_synth = sub.add_parser("synth", help="write a clustered synthetic dataset")
    p_synth.add_argument("--users", type=int, required=True)
    p_synth.add_argument("--items", type=int, required=True)
    p_synth.add_argument("--clusters", type=int, required=True)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--out", required=True, help="tsv file to write")
    p_synth.set_defaults(func=cmd_synth)

    p_inspect = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


def _pin_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _fallback_seed() -> int:
    env = os.environ.get("SHEAFREC_SEED")
    return int(env) if env else 0


def _experiment_config(args):
    from dataclasses import replace

    from .experiment import ExperimentConfig, apply_config_items, parse_config_items

    cfg = ExperimentConfig()
    file_items: dict[str, str] = {}
    if args.config:
        file_items = parse_config_items(Path(args.config).read_text(encoding="utf-8"))
        cfg = apply_config_items(cfg, file_items)
    overrides = {}
    for name in ("data", "format", "seed", "latent_dim", "layers", "node_stalk", "edge_stalk",
                 "loss", "lr", "weight_decay", "epochs", "batch_size", "out", "projection",
                 "bpr", "measure_time", "split_manifest"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.ks is not None:
        overrides["ks"] = tuple(int(v) for v in args.ks.split(",") if v)
    if "seed" not in overrides and "seed" not in file_items:
        overrides["seed"] = _fallback_seed()
    cfg = replace(cfg, **overrides)
    if not cfg.data:
        raise ValueError("no dataset given; pass --data or set it in the config file")
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    from .experiment import run_experiment

    outcome = run_experiment(cfg)
    print(f"wrote {len(outcome.files)} artifacts to {outcome.out_dir}")
    for k in sorted(outcome.report.per_k):
        m = outcome.report.per_k[k]
        print(f"  ndcg@{k}={m['ndcg']:.4f} f1@{k}={m['f1']:.4f} mrr@{k}={m['mrr']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _experiment_config(args)
    from .data import adapt_bipartite, build_bipartite, parse_ratings, split_interactions
    from .ioutil import write_json
    from .model import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else state.config.seed
    interactions = parse_ratings(cfg.data, cfg.format)
    split = split_interactions(interactions, seed)
    graph = adapt_bipartite(build_bipartite(split.train), projection=cfg.projection)
    from .evaluation import evaluate

    report = evaluate(state, split, ks=cfg.ks, graph=graph)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    write_json(out_dir / "run_manifest.json", {"files": ["metrics.json", "run_manifest.json"]})
    print(report.to_json(), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    from .experiment import parse_stalk_values, run_sweep

    if args.axis == "stalks":
        values = parse_stalk_values(args.values)
    elif args.axis == "loss":
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    else:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    result = run_sweep(cfg, args.axis, values)
    print(f"wrote {result.csv_path} ({len(result.rows)} rows)"
          + (f" and {len(result.figure_paths)} figures" if result.figure_paths else ""))
    failures = [r for r in result.rows if r["status"] != "ok"]
    for row in failures:
        print(f"  value {row['value']} failed: {row['error']}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic

    seed = args.seed if args.seed is not None else _fallback_seed()
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    interactions = generate_synthetic(args.users, args.items, args.clusters, args.noise, seed, path=out)
    print(f"wrote {interactions.n_records} interactions "
          f"({args.users} users x {args.items} items, {args.clusters} clusters) to {out}")
    return 0


def cmd_inspect(args) -> int:
    from .ioutil import read_json

    manifest = read_json(Path(args.checkpoint) / "checkpoint.json")
    model = manifest["model"]
    total = sum(int(math.prod(t["shape"])) for t in manifest["tensors"])
    print(f"checkpoint format v{manifest['format_version']}, dtype {manifest['dtype']}")
    print(f"users={manifest['n_users']} items={manifest['n_items']} seed={manifest['seed']}")
    print("model: " + " ".join(f"{k}={v}" for k, v in sorted(model.items())))
    print(f"{len(manifest['tensors'])} tensors, {total} parameters")
    for t in manifest["tensors"]:
        print(f"  {t['name']}: {tuple(t['shape'])}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        _pin_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"sheafrec: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
