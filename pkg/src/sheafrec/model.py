"""Trainable sheaf-diffusion recommender.

User and item embeddings live directly in the node stalks (one feature
channel).  Every layer generates restriction maps for each edge from the
concatenated endpoint features through two small learned generators (one per
endpoint side), assembles the block-normalized sheaf Laplacian from them, and
applies one diffusion update.  Final node features score user-item pairs by
inner product.

The forward pass is written once against the backend protocol from
:mod:`sheafrec.autodiff`, so the same code runs recorded (training) or plain
(evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ArrayBackend
from .data import BipartiteGraph
from .ioutil import canonical_json, read_json
from .sheaf import DEFAULT_EPS, StalkConfig

CHECKPOINT_VERSION = 1
_NUMPY = ArrayBackend()


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.  Stalk sizes default to the latent dimension, so
    the embedding occupies the whole node stalk."""

    latent_dim: int = 64
    layers: int = 5
    node_stalk: int | None = None
    edge_stalk: int | None = None
    nonlinearity: str = "elu"
    gen_hidden: int | None = None
    seed: int = 0

    @property
    def node_dim(self) -> int:
        return self.latent_dim if self.node_stalk is None else self.node_stalk

    @property
    def edge_dim(self) -> int:
        return self.latent_dim if self.edge_stalk is None else self.edge_stalk

    @property
    def hidden(self) -> int:
        """Generator hidden width; the knob parameter-count equalization turns."""
        return max(8, 2 * self.node_dim) if self.gen_hidden is None else self.gen_hidden

    def stalks(self) -> StalkConfig:
        return StalkConfig(self.node_dim, self.edge_dim)


@dataclass
class ModelState:
    config: ModelConfig
    n_users: int
    n_items: int
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            n_users=self.n_users,
            n_items=self.n_items,
            params={k: v.copy() for k, v in self.params.items()},
        )


@dataclass(frozen=True, eq=False)
class FinalRepresentations:
    """Per-user and per-item feature blocks after the last layer."""

    user_repr: np.ndarray  # (n_users, node_dim)
    item_repr: np.ndarray  # (n_items, node_dim)


def parameter_shapes(config: ModelConfig, n_users: int, n_items: int) -> dict[str, tuple[int, ...]]:
    l, d, de, h = config.latent_dim, config.node_dim, config.edge_dim, config.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "user_table": (n_users, l),
        "item_table": (n_items, l),
    }
    if d != l:
        shapes["input_proj"] = (l, d)
    for i in range(config.layers):
        for side in ("tail_gen", "head_gen"):
            shapes[f"layer{i}.{side}.w_in"] = (2 * d, h)
            shapes[f"layer{i}.{side}.b_in"] = (h,)
            shapes[f"layer{i}.{side}.w_out"] = (h, de * d)
            shapes[f"layer{i}.{side}.b_out"] = (de * d,)
        shapes[f"layer{i}.w1"] = (d, d)
        shapes[f"layer{i}.w2"] = (1, 1)
    return shapes


def parameter_count(config: ModelConfig, n_users: int, n_items: int) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config, n_users, n_items).values())


def count_parameters(state: ModelState) -> int:
    return sum(p.size for p in state.params.values())


def init_model(config: ModelConfig, graph: BipartiteGraph) -> ModelState:
    """Seeded initialization: embedding tables uniform on (-1/sqrt(l), 1/sqrt(l)),
    generator weights small-scale uniform with zero biases, W1/W2 identity
    plus small noise."""
    if config.latent_dim <= 0 or config.layers <= 0:
        raise ConfigError(
            f"latent_dim and layers must be positive, got {config.latent_dim}, {config.layers}"
        )
    if config.node_dim <= 0 or config.edge_dim <= 0:
        raise ConfigError(f"stalk dimensions must be positive, got {(config.node_dim, config.edge_dim)}")
    if graph.n_users == 0 or graph.n_items == 0:
        raise ConfigError("graph is empty: need at least one user and one item")
    rng = np.random.default_rng(config.seed)
    l = config.latent_dim
    table_scale = 1.0 / np.sqrt(l)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config, graph.n_users, graph.n_items).items():
        if name in ("user_table", "item_table", "input_proj"):
            params[name] = rng.uniform(-table_scale, table_scale, size=shape)
        elif name.endswith(".w_in") or name.endswith(".w_out"):
            scale = 0.5 / np.sqrt(shape[0])
            params[name] = rng.uniform(-scale, scale, size=shape)
        elif name.endswith(".b_in") or name.endswith(".b_out"):
            params[name] = np.zeros(shape)
        elif name.endswith(".w1"):
            params[name] = np.eye(shape[0]) + rng.uniform(-0.01, 0.01, size=shape)
        elif name.endswith(".w2"):
            params[name] = np.ones(shape) + rng.uniform(-0.01, 0.01, size=shape)
        else:  # pragma: no cover - parameter_shapes is the single source of names
            raise ConfigError(f"unknown parameter {name}")
    return ModelState(config=config, n_users=graph.n_users, n_items=graph.n_items, params=params)


def _generator(ops, params, prefix: str, z, n_edges: int, edge_dim: int, node_dim: int):
    h = ops.activation("tanh", ops.add(ops.matmul(z, params[f"{prefix}.w_in"]), params[f"{prefix}.b_in"]))
    m = ops.add(ops.matmul(h, params[f"{prefix}.w_out"]), params[f"{prefix}.b_out"])
    return ops.reshape(m, (n_edges, edge_dim, node_dim))


def _diffusion_layer(ops, params, layer: int, x, tails, heads, n_vertices: int, config: ModelConfig):
    d, de = config.node_dim, config.edge_dim
    n_edges = len(tails)
    z = ops.concat([ops.gather(x, tails), ops.gather(x, heads)], axis=1)
    m_tail = _generator(ops, params, f"layer{layer}.tail_gen", z, n_edges, de, d)
    m_head = _generator(ops, params, f"layer{layer}.head_gen", z, n_edges, de, d)

    # degree blocks: sum of F^T F over each node's incidences
    gram_tail = ops.matmul(m_tail, m_tail, transpose_a=True)
    gram_head = ops.matmul(m_head, m_head, transpose_a=True)
    deg = ops.add(ops.scatter_add(gram_tail, tails, n_vertices),
                  ops.scatter_add(gram_head, heads, n_vertices))
    dinv = ops.sym_inv_sqrt(deg, eps=DEFAULT_EPS)

    # right-normalized maps: F D^(-1/2); the Laplacian then applies as
    # delta~^T delta~ which equals D^(-1/2) L D^(-1/2)
    norm_tail = ops.matmul(m_tail, ops.gather(dinv, tails))
    norm_head = ops.matmul(m_head, ops.gather(dinv, heads))

    p = ops.matmul(x, params[f"layer{layer}.w1"], transpose_b=True)
    p = ops.scale(p, params[f"layer{layer}.w2"])
    p3 = ops.reshape(p, (n_vertices, d, 1))
    edge_diff = ops.sub(ops.matmul(norm_head, ops.gather(p3, heads)),
                        ops.matmul(norm_tail, ops.gather(p3, tails)))
    pulled = ops.sub(
        ops.scatter_add(ops.matmul(norm_head, edge_diff, transpose_a=True), heads, n_vertices),
        ops.scatter_add(ops.matmul(norm_tail, edge_diff, transpose_a=True), tails, n_vertices),
    )
    update = ops.activation(config.nonlinearity, ops.reshape(pulled, (n_vertices, d)))
    return ops.sub(x, update)


def forward_on(ops, params, config: ModelConfig, graph: BipartiteGraph):
    """Backend-generic forward pass; returns (user_repr, item_repr) handles."""
    tails, heads = graph.oriented_edges()
    n = graph.n_vertices
    x = ops.concat([params["user_table"], params["item_table"]], axis=0)
    if "input_proj" in params:
        x = ops.matmul(x, params["input_proj"])
    for layer in range(config.layers):
        x = _diffusion_layer(ops, params, layer, x, tails, heads, n, config)
    user_repr = ops.gather(x, np.arange(graph.n_users))
    item_repr = ops.gather(x, np.arange(graph.n_users, n))
    return user_repr, item_repr


def forward(state: ModelState, graph: BipartiteGraph) -> FinalRepresentations:
    """Pure function of (parameters, graph); never mutates the state."""
    u, v = forward_on(_NUMPY, state.params, state.config, graph)
    return FinalRepresentations(user_repr=u, item_repr=v)


def score_all(repr: FinalRepresentations) -> np.ndarray:
    """Dense user x item relevance scores by inner product."""
    u, v = repr.user_repr, repr.item_repr
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ValueError(f"representation widths differ: {u.shape} vs {v.shape}")
    return u @ v.T


def top_k(scores: np.ndarray, user: int, k: int, exclude=frozenset()) -> list[int]:
    """Highest-scoring items for one user, ties broken by ascending item id.

    Items in ``exclude`` (training positives at evaluation time) never
    appear; fewer than k items come back when the candidate pool is small.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0 <= user < scores.shape[0]:
        raise LookupError(f"unknown user id {user}")
    row = scores[user]
    candidates = np.arange(scores.shape[1])
    if exclude:
        mask = np.ones(scores.shape[1], dtype=bool)
        mask[np.asarray(sorted(exclude), dtype=np.int64)] = False
        candidates = candidates[mask]
    order = np.lexsort((candidates, -row[candidates]))
    return [int(i) for i in candidates[order[:k]]]


def rank_row(row: np.ndarray, k: int) -> np.ndarray:
    """Top-k item ids for one score row, same tie-breaking as :func:`top_k`."""
    ids = np.arange(len(row))
    order = np.lexsort((ids, -row))
    return ids[order[:k]]


# ----------------------------------------------------------------------
# checkpoints: canonical JSON manifest + one little-endian float32 blob

def save_checkpoint(state: ModelState, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "seed": cfg.seed,
        "n_users": state.n_users,
        "n_items": state.n_items,
        "model": {
            "latent_dim": cfg.latent_dim,
            "layers": cfg.layers,
            "node_stalk": cfg.node_dim,
            "edge_stalk": cfg.edge_dim,
            "nonlinearity": cfg.nonlinearity,
            "gen_hidden": cfg.hidden,
            "seed": cfg.seed,
        },
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.params.items()],
    }
    manifest_path = directory / "checkpoint.json"
    blob_path = directory / "checkpoint.bin"
    manifest_path.write_text(canonical_json(manifest), encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in state.params.values())
    blob_path.write_bytes(blob)
    return manifest_path, blob_path


def load_checkpoint(directory) -> ModelState:
    directory = Path(directory)
    manifest = read_json(directory / "checkpoint.json")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    m = manifest["model"]
    config = ModelConfig(
        latent_dim=m["latent_dim"],
        layers=m["layers"],
        node_stalk=m["node_stalk"],
        edge_stalk=m["edge_stalk"],
        nonlinearity=m["nonlinearity"],
        gen_hidden=m["gen_hidden"],
        seed=m["seed"],
    )
    raw = (directory / "checkpoint.bin").read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
    if offset != len(raw):
        raise ValueError(f"checkpoint blob has {len(raw)} bytes, manifest expects {offset}")
    return ModelState(
        config=config,
        n_users=manifest["n_users"],
        n_items=manifest["n_items"],
        params=params,
    )
