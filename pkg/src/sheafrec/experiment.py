"""End-to-end experiment runner: data -> split -> train -> evaluate -> artifacts.

Every run writes its artifacts (config echo, history, checkpoint, metrics,
figures) into one output directory and lists them all in a run manifest.
Sweeps run one experiment per axis value with a shared seed and split, then
consolidate a CSV plus figures.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import (
    adapt_bipartite,
    build_bipartite,
    parse_ratings,
    split_interactions,
    write_split_manifest,
)
from .evaluation import METRIC_NAMES, MetricsReport, evaluate, measure_rec_time
from .ioutil import write_json
from .model import (
    ModelConfig,
    ModelState,
    count_parameters,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .training import TrainConfig, train

SWEEP_AXES = ("latent_dim", "layers", "stalks", "loss")


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = ""
    format: str = "tsv"
    seed: int = 0
    latent_dim: int = 64
    layers: int = 5
    node_stalk: int | None = None
    edge_stalk: int | None = None
    nonlinearity: str = "elu"
    gen_hidden: int | None = None
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 1024
    loss: str = "bpr"
    bpr: str = "pairwise"
    ks: tuple[int, ...] = (10, 20)
    projection: str = "off"
    out: str = "runs/experiment"
    measure_time: bool = False
    split_manifest: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_dim=self.latent_dim,
            layers=self.layers,
            node_stalk=self.node_stalk,
            edge_stalk=self.edge_stalk,
            nonlinearity=self.nonlinearity,
            gen_hidden=self.gen_hidden,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            loss=self.loss,
            bpr_variant=self.bpr,
            seed=self.seed,
        )


# ----------------------------------------------------------------------
# flat key=value config files (CLI flags override file values)

def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ExperimentConfig:
    return apply_config_items(ExperimentConfig(), parse_config_items(text))


def parse_config_items(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def apply_config_items(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    known = {f.name: f for f in fields(cfg)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw)
    return replace(cfg, **updates)


def _coerce(key: str, raw: str):
    if raw == "none":
        return None
    if key in ("seed", "latent_dim", "layers", "epochs", "batch_size", "node_stalk", "edge_stalk", "gen_hidden"):
        return int(raw)
    if key in ("lr", "weight_decay"):
        return float(raw)
    if key == "ks":
        return tuple(int(v) for v in raw.split(",") if v)
    if key in ("measure_time", "split_manifest"):
        return raw.lower() in ("true", "1", "yes")
    return raw


# ----------------------------------------------------------------------
# single experiment

@dataclass
class ExperimentOutcome:
    config: ExperimentConfig
    report: MetricsReport
    out_dir: Path
    files: list[str]
    history: list[dict]
    param_count: int
    wall_time_s: float
    state: ModelState


def run_experiment(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Parse, split, train, and evaluate; write all artifacts.

    The message-passing graph is built from the training split only.  The
    final evaluation runs on the reloaded best checkpoint, so the metrics
    file describes exactly what the checkpoint reproduces.
    """
    from .reporting import render_history_figure

    started = time.perf_counter()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: list[str] = []

    interactions = parse_ratings(cfg.data, cfg.format)
    split = split_interactions(interactions, cfg.seed)
    graph = adapt_bipartite(build_bipartite(split.train), projection=cfg.projection)
    if cfg.split_manifest:
        write_split_manifest(split, out_dir / "split_manifest.json")
        files.append("split_manifest.json")

    state = init_model(cfg.model_config(), graph)
    n_params = count_parameters(state)
    result = train(state, split, cfg.train_config(), graph=graph)

    history_path = out_dir / "history.jsonl"
    with history_path.open("w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    files.append("history.jsonl")

    if result.history:
        render_history_figure(result.history, out_dir / "history.png")
        files.append("history.png")

    save_checkpoint(result.state, out_dir)
    files.extend(["checkpoint.json", "checkpoint.bin"])
    best = load_checkpoint(out_dir)

    report = evaluate(best, split, ks=cfg.ks, graph=graph)
    if cfg.measure_time:
        timing = measure_rec_time(best, graph, user=0, k=100, attempts=10)
        write_json(out_dir / "timing.json", {"mean_s": timing.mean_s, "std_s": timing.std_s,
                                             "samples": list(timing.samples)})
        files.append("timing.json")
    (out_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    files.append("metrics.json")

    (out_dir / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    files.append("config.txt")

    files.append("run_manifest.json")
    write_json(out_dir / "run_manifest.json", {"files": sorted(files)})

    return ExperimentOutcome(
        config=cfg,
        report=report,
        out_dir=out_dir,
        files=sorted(files),
        history=result.history,
        param_count=n_params,
        wall_time_s=time.perf_counter() - started,
        state=best,
    )


# ----------------------------------------------------------------------
# sweeps

def stalk_label(pair: tuple[int, int]) -> str:
    return f"{pair[0]}x{pair[1]}"


def parse_stalk_values(text: str) -> list[tuple[int, int]]:
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, _, b = part.partition("x")
        values.append((int(a), int(b)))
    return values


def equalized_hidden(
    base: ExperimentConfig,
    stalks: tuple[int, int],
    target_count: int,
    n_users: int,
    n_items: int,
) -> int:
    """Generator hidden width that matches the target parameter count.

    The total count is affine in the hidden width, so invert the affine map
    and round to the nearest positive integer.
    """
    node, edge = stalks
    cfg0 = replace(base.model_config(), node_stalk=node, edge_stalk=edge, gen_hidden=1)
    cfg1 = replace(cfg0, gen_hidden=2)
    at1 = parameter_count(cfg0, n_users, n_items)
    slope = parameter_count(cfg1, n_users, n_items) - at1
    if slope <= 0:
        return 1
    return max(1, round((target_count - at1) / slope) + 1)


def _sweep_value_config(cfg: ExperimentConfig, axis: str, value, counts: tuple[int, int],
                        target_count: int | None) -> tuple[ExperimentConfig, str]:
    if axis == "latent_dim":
        return replace(cfg, latent_dim=int(value)), str(value)
    if axis == "layers":
        return replace(cfg, layers=int(value)), str(value)
    if axis == "loss":
        return replace(cfg, loss=str(value)), str(value)
    if axis == "stalks":
        node, edge = value
        hidden = equalized_hidden(cfg, (node, edge), target_count, *counts)
        derived = replace(cfg, node_stalk=node, edge_stalk=edge, gen_hidden=hidden)
        return derived, stalk_label(value)
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


@dataclass
class SweepResult:
    rows: list[dict]
    csv_path: Path
    figure_paths: list[Path]


def run_sweep(base: ExperimentConfig, axis: str, values) -> SweepResult:
    """One experiment per value, shared seed and split; consolidated CSV.

    For the stalk axis, every run's generator hidden width is chosen so the
    total trainable parameter count matches the (N, N) configuration; the
    exact counts land in the CSV for auditing.  A failed run becomes an
    error row and the sweep continues.
    """
    from .reporting import render_sweep_figures

    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    out_dir = Path(base.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    interactions = parse_ratings(base.data, base.format)
    counts = (interactions.n_users, interactions.n_items)
    target_count = None
    if axis == "stalks":
        target = next((v for v in values if v[0] == v[1]), None)
        if target is None:
            target = max(values, key=lambda v: v[0] * v[1])
        target_cfg = replace(base.model_config(), node_stalk=target[0], edge_stalk=target[1])
        target_count = parameter_count(target_cfg, *counts)

    ks = tuple(sorted(base.ks))
    rows: list[dict] = []
    for value in values:
        derived, label = _sweep_value_config(base, axis, value, counts, target_count)
        derived = replace(derived, out=str(out_dir / f"run_{axis}_{label}"))
        row = {"axis": axis, "value": label, "status": "ok", "error": ""}
        try:
            outcome = run_experiment(derived)
            row["param_count"] = outcome.param_count
            row["wall_time_s"] = outcome.wall_time_s
            row["users_evaluated"] = outcome.report.users_evaluated
            for k in ks:
                for metric in METRIC_NAMES:
                    row[f"{metric}@{k}"] = outcome.report.per_k[k][metric]
        except Exception as exc:  # noqa: BLE001 - per-run failures must not stop the sweep
            row["status"] = "error"
            row["error"] = f"{type(exc).__name__}: {exc}"
            row["param_count"] = ""
            row["wall_time_s"] = ""
            row["users_evaluated"] = ""
            for k in ks:
                for metric in METRIC_NAMES:
                    row[f"{metric}@{k}"] = ""
        rows.append(row)

    columns = ["axis", "value", "status", "error", "param_count", "wall_time_s", "users_evaluated"]
    columns += [f"{metric}@{k}" for k in ks for metric in METRIC_NAMES]
    csv_path = out_dir / "sweep.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    figures = render_sweep_figures(rows, ks, axis, out_dir)
    return SweepResult(rows=rows, csv_path=csv_path, figure_paths=figures)
