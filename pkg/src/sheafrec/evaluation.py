"""Top-K ranking metrics, per-user aggregation, and recommendation timing.

All metrics use binary relevance: any held-out interaction counts, whatever
its rating.  Users without held-out positives are skipped, not scored zero.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import BipartiteGraph, SplitSet, adapt_bipartite, build_bipartite, items_by_user
from .ioutil import canonical_json
from .model import ModelState, forward, rank_row, score_all, top_k

METRIC_NAMES = ("precision", "recall", "f1", "ndcg", "mrr")


class EvaluationError(RuntimeError):
    """No user could be evaluated."""


def precision_recall_at_k(ranked, relevant, k: int):
    """(precision, recall) over the top k; None when nothing is relevant.

    ``ranked`` must already be deduplicated.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    relevant = set(relevant)
    if not relevant:
        return None
    hits = len(set(ranked[:k]) & relevant)
    return hits / k, hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int):
    """Binary-gain DCG with 1/log2(position + 1) discount, 1-based positions,
    normalized by the ideal ranking of min(|relevant|, k) items."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = sum(1.0 / math.log2(pos + 1) for pos, item in enumerate(ranked[:k], start=1) if item in relevant)
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


def mrr_at_k(ranked, relevant, k: int):
    """Reciprocal rank of the first relevant item in the top k, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    relevant = set(relevant)
    if not relevant:
        return None
    for pos, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            return 1.0 / pos
    return 0.0


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class TimingResult:
    mean_s: float
    std_s: float
    samples: tuple[float, ...]


@dataclass(frozen=True)
class MetricsReport:
    """Unweighted per-user means of every metric at every configured K."""

    per_k: dict[int, dict[str, float]]
    users_evaluated: int
    rec_time: TimingResult | None = None

    def to_json(self) -> str:
        obj = {
            "k": {str(k): {m: self.per_k[k][m] for m in METRIC_NAMES} for k in self.per_k},
            "rec_time": None if self.rec_time is None else {
                "mean_s": self.rec_time.mean_s,
                "std_s": self.rec_time.std_s,
            },
            "users_evaluated": self.users_evaluated,
        }
        return canonical_json(obj)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        import json

        obj = json.loads(text)
        per_k = {int(k): dict(v) for k, v in obj["k"].items()}
        rec = obj.get("rec_time")
        timing = None if rec is None else TimingResult(rec["mean_s"], rec["std_s"], ())
        return cls(per_k=per_k, users_evaluated=obj["users_evaluated"], rec_time=timing)


def evaluate_scores(
    scores: np.ndarray,
    exclude_by_user: list[np.ndarray],
    relevant_by_user: list[np.ndarray],
    ks,
) -> MetricsReport:
    """Rank every user with held-out positives and average the metrics."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks:
        raise ValueError("need at least one K")
    k_max = max(ks)
    totals = {k: {m: 0.0 for m in METRIC_NAMES} for k in ks}
    evaluated = 0
    for user in range(scores.shape[0]):
        relevant = set(relevant_by_user[user].tolist())
        if not relevant:
            continue
        ranked = top_k(scores, user, k_max, exclude=set(exclude_by_user[user].tolist()))
        evaluated += 1
        for k in ks:
            p, r = precision_recall_at_k(ranked, relevant, k)
            totals[k]["precision"] += p
            totals[k]["recall"] += r
            totals[k]["f1"] += f1_score(p, r)
            totals[k]["ndcg"] += ndcg_at_k(ranked, relevant, k)
            totals[k]["mrr"] += mrr_at_k(ranked, relevant, k)
    if evaluated == 0:
        raise EvaluationError("no user has held-out interactions to evaluate")
    per_k = {k: {m: totals[k][m] / evaluated for m in METRIC_NAMES} for k in ks}
    return MetricsReport(per_k=per_k, users_evaluated=evaluated)


def evaluate(
    state: ModelState,
    data: SplitSet,
    ks=(10, 20),
    graph: BipartiteGraph | None = None,
    part: str = "test",
) -> MetricsReport:
    """Score all pairs with the frozen model, exclude each user's training
    positives, and rank against the chosen held-out part."""
    if part not in ("validation", "test"):
        raise ValueError(f"part must be 'validation' or 'test', got {part!r}")
    target = getattr(data, part)
    if target.n_records == 0:
        raise EvaluationError(f"{part} split is empty")
    if graph is None:
        graph = adapt_bipartite(build_bipartite(data.train))
    scores = score_all(forward(state, graph))
    return evaluate_scores(
        scores,
        exclude_by_user=items_by_user(data.train),
        relevant_by_user=items_by_user(target),
        ks=ks,
    )


def validation_ndcg(state: ModelState, data: SplitSet, graph: BipartiteGraph | None = None, k: int = 10):
    """Mean NDCG@k against the validation split; None when nothing to rank."""
    if data.validation.n_records == 0:
        return None
    try:
        report = evaluate(state, data, ks=(k,), graph=graph, part="validation")
    except EvaluationError:
        return None
    return report.per_k[k]["ndcg"]


def measure_rec_time(
    state: ModelState,
    graph: BipartiteGraph,
    user: int = 0,
    k: int = 100,
    attempts: int = 10,
    clock=time.perf_counter,
) -> TimingResult:
    """Wall-clock of forward + one score row + top-k ranking for one user.

    Two warm-up runs precede ``attempts`` timed runs; returns the mean and
    sample standard deviation.  The clock is injectable for tests.
    """

    def run_once() -> None:
        reprs = forward(state, graph)
        row = reprs.user_repr[user] @ reprs.item_repr.T
        rank_row(row, k)

    for _ in range(2):
        run_once()
    samples = []
    for _ in range(attempts):
        t0 = clock()
        run_once()
        samples.append(clock() - t0)
    arr = np.asarray(samples)
    std = float(arr.std(ddof=1)) if attempts > 1 else 0.0
    return TimingResult(mean_s=float(arr.mean()), std_s=std, samples=tuple(samples))
