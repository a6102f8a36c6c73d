"""Independent reference implementations used as test oracles.

Everything here is written directly from definitions (loops, dense algebra,
finite differences) on a separate code path from the package.
"""

from __future__ import annotations

import math

import numpy as np

from sheafrec.autodiff import Tape
from sheafrec.sheaf import SheafStructure, StalkConfig


# ----------------------------------------------------------------------
# dense sheaf algebra

def dense_coboundary(sheaf: SheafStructure) -> np.ndarray:
    """Row block per edge: +head_map at the head, -tail_map at the tail."""
    de, dv = sheaf.stalks.edge_dim, sheaf.stalks.node_dim
    out = np.zeros((sheaf.n_edges * de, sheaf.n_nodes * dv))
    for e in range(sheaf.n_edges):
        t, h = int(sheaf.tails[e]), int(sheaf.heads[e])
        out[e * de:(e + 1) * de, h * dv:(h + 1) * dv] += sheaf.head_maps[e]
        out[e * de:(e + 1) * de, t * dv:(t + 1) * dv] -= sheaf.tail_maps[e]
    return out


def dense_normalized_laplacian(sheaf: SheafStructure, eps: float) -> np.ndarray:
    """D^(-1/2) (delta^T delta) D^(-1/2) with blockwise eigendecomposition."""
    delta = dense_coboundary(sheaf)
    lap = delta.T @ delta
    dv = sheaf.stalks.node_dim
    dinv = np.zeros_like(lap)
    for v in range(sheaf.n_nodes):
        block = lap[v * dv:(v + 1) * dv, v * dv:(v + 1) * dv]
        w, q = np.linalg.eigh(0.5 * (block + block.T))
        dinv[v * dv:(v + 1) * dv, v * dv:(v + 1) * dv] = q @ np.diag((w + eps) ** -0.5) @ q.T
    return dinv @ lap @ dinv


def random_sheaf(rng: np.random.Generator, max_nodes: int = 30, max_dim: int = 4) -> SheafStructure:
    n = int(rng.integers(2, max_nodes + 1))
    dv = int(rng.integers(1, max_dim + 1))
    de = int(rng.integers(1, max_dim + 1))
    wanted = int(rng.integers(1, max(2, 2 * n)))
    edges = set()
    attempts = 0
    while len(edges) < wanted and attempts < 10 * wanted + 20:
        a, b = rng.integers(0, n, size=2)
        attempts += 1
        if a != b:
            edges.add((min(int(a), int(b)), max(int(a), int(b))))
    edges = sorted(edges)
    if not edges:
        edges = [(0, 1)]
    m = len(edges)
    return SheafStructure(
        n_nodes=n,
        tails=np.asarray([e[0] for e in edges], dtype=np.int64),
        heads=np.asarray([e[1] for e in edges], dtype=np.int64),
        stalks=StalkConfig(dv, de),
        tail_maps=rng.normal(size=(m, de, dv)),
        head_maps=rng.normal(size=(m, de, dv)),
    )


# ----------------------------------------------------------------------
# brute-force ranking metrics

def bf_precision(ranked, relevant, k):
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / k


def bf_recall(ranked, relevant, k):
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def bf_f1(ranked, relevant, k):
    p = bf_precision(ranked, relevant, k)
    r = bf_recall(ranked, relevant, k)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def bf_ndcg(ranked, relevant, k):
    dcg = 0.0
    for pos in range(min(k, len(ranked))):
        if ranked[pos] in relevant:
            dcg += 1.0 / math.log2(pos + 2)
    ideal = sum(1.0 / math.log2(pos + 2) for pos in range(min(len(relevant), k)))
    return dcg / ideal


def bf_mrr(ranked, relevant, k):
    for pos in range(min(k, len(ranked))):
        if ranked[pos] in relevant:
            return 1.0 / (pos + 1)
    return 0.0


# ----------------------------------------------------------------------
# finite differences

def finite_difference(fn, arrays, h: float = 1e-5):
    """Central-difference gradients of scalar fn(arrays) per input array."""
    grads = []
    for target in range(len(arrays)):
        x = arrays[target]
        g = np.zeros_like(x)
        flat, gf = x.ravel(), g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn(arrays))
            flat[j] = orig - h
            fm = float(fn(arrays))
            flat[j] = orig
            gf[j] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays, h: float = 1e-5):
    """Max relative error between tape gradients and central differences.

    ``build(tape, tensors) -> scalar loss tensor``.
    """
    tape = Tape()
    tensors = [tape.tensor(a, requires_grad=True) for a in arrays]
    loss = build(tape, tensors)
    grads = tape.backward(loss)

    def fn(arrs):
        t2 = Tape()
        ts = [t2.tensor(a) for a in arrs]
        return build(t2, ts).value

    numeric = finite_difference(fn, arrays, h=h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        g = grads[t]
        denom = max(np.abs(num).max(), np.abs(g).max(), 1e-8)
        worst = max(worst, float(np.abs(num - g).max() / denom))
    return worst
