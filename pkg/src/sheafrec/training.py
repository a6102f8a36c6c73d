"""Losses, triplet sampling, the optimizer, and the epoch loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ArrayBackend, Tape
from .data import BipartiteGraph, SplitSet, adapt_bipartite, build_bipartite, items_by_user
from .model import ModelState, forward_on

_NUMPY = ArrayBackend()

LOSSES = ("bpr", "rmse", "bce")
BPR_VARIANTS = ("pairwise", "summed")


class SamplingError(RuntimeError):
    """Negative sampling could not find a non-interacted item."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


# ----------------------------------------------------------------------
# losses.  Each takes score vectors and an ops backend, so the same code
# computes plain values and recorded (differentiable) ones.

def bpr_loss(pos_scores, neg_scores, ops=_NUMPY):
    """Ranking loss on the summed scores: -ln sigmoid(sum(pos) - sum(neg)),
    evaluated through the stable softplus identity -ln sigmoid(x) = softplus(-x)."""
    _check_pair("bpr_loss", pos_scores, neg_scores, ops, equal=True)
    diff = ops.sub(ops.sum(pos_scores), ops.sum(neg_scores))
    return ops.softplus(ops.scale(diff, -1.0))


def bpr_loss_pairwise(pos_scores, neg_scores, ops=_NUMPY):
    """Per-triplet estimator: mean of softplus(-(s_pos - s_neg))."""
    _check_pair("bpr_loss", pos_scores, neg_scores, ops, equal=True)
    return ops.mean(ops.softplus(ops.scale(ops.sub(pos_scores, neg_scores), -1.0)))


def bce_loss(pos_scores, neg_scores, ops=_NUMPY):
    """Binary cross-entropy with labels 1/0, in softplus form."""
    _check_pair("bce_loss", pos_scores, neg_scores, ops, equal=False)
    return ops.add(ops.mean(ops.softplus(ops.scale(pos_scores, -1.0))),
                   ops.mean(ops.softplus(neg_scores)))


def rmse_loss(predicted, targets, ops=_NUMPY):
    """sqrt(mean((predicted - targets)^2)) over observed interactions."""
    _check_pair("rmse_loss", predicted, targets, ops, equal=True)
    return ops.sqrt(ops.mean(ops.square(ops.sub(predicted, targets))))


def _check_pair(name, a, b, ops, equal: bool) -> None:
    na, nb = ops.value(a).size, ops.value(b).size
    if na == 0 or nb == 0:
        raise ValueError(f"{name} requires non-empty score vectors")
    if equal and na != nb:
        raise ValueError(f"{name} requires equal lengths, got {na} and {nb}")


# ----------------------------------------------------------------------
# sampling

@dataclass(frozen=True, eq=False)
class TripletBatch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


class TrainIndex:
    """Per-user positive items of the training set, as arrays and sets."""

    def __init__(self, train):
        self.n_items = train.n_items
        self.items = items_by_user(train)
        self.sets = [set(a.tolist()) for a in self.items]
        self.eligible = np.asarray([u for u, a in enumerate(self.items) if len(a)], dtype=np.int64)


MAX_NEGATIVE_ATTEMPTS = 1000


def sample_batch(train, batch_size: int, rng: np.random.Generator, index: TrainIndex | None = None) -> TripletBatch:
    """One positive and one rejection-sampled negative per drawn user.

    Users are drawn uniformly with replacement among those with at least one
    training positive.  Negatives are uniform over items not interacted with
    in training (held-out interactions may be drawn as negatives).
    """
    if index is None:
        index = TrainIndex(train)
    if len(index.eligible) == 0:
        raise ValueError("no user has a training positive to sample from")
    users = index.eligible[rng.integers(0, len(index.eligible), size=batch_size)]
    positives = np.empty(batch_size, dtype=np.int64)
    negatives = np.empty(batch_size, dtype=np.int64)
    for k, u in enumerate(users):
        pos_items = index.items[u]
        positives[k] = pos_items[rng.integers(0, len(pos_items))]
        taken = index.sets[u]
        for _ in range(MAX_NEGATIVE_ATTEMPTS):
            j = int(rng.integers(0, index.n_items))
            if j not in taken:
                negatives[k] = j
                break
        else:
            raise SamplingError(
                f"user {int(u)} interacted with nearly every item; "
                f"no negative found in {MAX_NEGATIVE_ATTEMPTS} attempts"
            )
    return TripletBatch(users=users, positives=positives, negatives=negatives)


# ----------------------------------------------------------------------
# optimizer: adaptive moments with decoupled weight decay

@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


# ----------------------------------------------------------------------
# epoch loop

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 1024
    loss: str = "bpr"
    bpr_variant: str = "pairwise"
    seed: int = 0


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]


def _gathered_scores(ops, user_repr, item_repr, users, items):
    u = ops.gather(user_repr, users)
    v = ops.gather(item_repr, items)
    return ops.sum(ops.mul(u, v), axis=1)


def train(state: ModelState, data: SplitSet, cfg: TrainConfig, graph: BipartiteGraph | None = None) -> TrainResult:
    """Optimize in place; return the best-validation snapshot plus history.

    The message-passing graph is built from the training split (leakage-free)
    unless one is supplied.  History records per-epoch mean training loss and
    validation ranking quality; the returned state is the checkpoint with the
    best validation NDCG@10, or the final state when validation is empty.
    """
    if cfg.loss not in LOSSES:
        raise ValueError(f"unknown loss {cfg.loss!r}; choose from {LOSSES}")
    if cfg.bpr_variant not in BPR_VARIANTS:
        raise ValueError(f"unknown bpr variant {cfg.bpr_variant!r}; choose from {BPR_VARIANTS}")
    train_set = data.train
    if train_set.n_records == 0:
        raise ValueError("training set is empty")
    if graph is None:
        graph = adapt_bipartite(build_bipartite(train_set))
    from .evaluation import validation_ndcg  # local import to avoid a cycle

    index = TrainIndex(train_set)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0xBA7C4])
    n_batches = math.ceil(train_set.n_records / cfg.batch_size)
    history: list[dict] = []
    best_val = -np.inf
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b in range(n_batches):
            tape = Tape()
            wrapped = {k: tape.tensor(v, requires_grad=True) for k, v in state.params.items()}
            user_repr, item_repr = forward_on(tape, wrapped, state.config, graph)
            if cfg.loss == "rmse":
                pick = rng.integers(0, train_set.n_records, size=cfg.batch_size)
                pred = _gathered_scores(tape, user_repr, item_repr,
                                        train_set.users[pick], train_set.items[pick])
                loss_t = rmse_loss(pred, tape.tensor(train_set.ratings[pick]), ops=tape)
            else:
                batch = sample_batch(train_set, cfg.batch_size, rng, index=index)
                pos = _gathered_scores(tape, user_repr, item_repr, batch.users, batch.positives)
                neg = _gathered_scores(tape, user_repr, item_repr, batch.users, batch.negatives)
                if cfg.loss == "bce":
                    loss_t = bce_loss(pos, neg, ops=tape)
                elif cfg.bpr_variant == "summed":
                    loss_t = bpr_loss(pos, neg, ops=tape)
                else:
                    loss_t = bpr_loss_pairwise(pos, neg, ops=tape)
            loss_value = float(loss_t.value)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}, batch {b}"
                )
            grads = tape.backward(loss_t)
            opt.step(state.params, {k: grads[wrapped[k]] for k in state.params})
            losses.append(loss_value)
        val = validation_ndcg(state, data, graph=graph, k=10)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "val_ndcg@10": val,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
            "loss_name": cfg.loss,
        })
        if val is not None and val > best_val:
            best_val = val
            best_params = {k: v.copy() for k, v in state.params.items()}

    if best_params is None:
        return TrainResult(state=state, history=history)
    best_state = ModelState(
        config=state.config,
        n_users=state.n_users,
        n_items=state.n_items,
        params=best_params,
    )
    return TrainResult(state=best_state, history=history)
