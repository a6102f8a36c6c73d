"""Cellular sheaf linear algebra on graphs.

A cellular sheaf attaches a ``node_dim``-dimensional stalk to every vertex
and an ``edge_dim``-dimensional stalk to every edge of an undirected graph,
plus one restriction map (an ``edge_dim x node_dim`` matrix) per incident
node-edge pair.  With a fixed orientation ``tail -> head`` per edge, the
coboundary sends node data to per-edge differences::

    (delta x)_e = head_map_e @ x_head - tail_map_e @ x_tail

Its Gram form ``delta^T delta`` is the sheaf Laplacian, a positive
semidefinite operator on node data that reduces to the ordinary graph
Laplacian when all stalks are one-dimensional with unit maps.  The
block-normalized Laplacian drives the diffusion step used by the model.

All operators are block-sparse with uniform block shapes and immutable after
construction, so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kernels import ACTIVATIONS, scatter_add

#: default ridge added to degree blocks before the inverse square root, so
#: low-degree and isolated nodes stay invertible.
DEFAULT_EPS = 1e-6


class SheafError(ValueError):
    """Structural problem in a sheaf or one of its operators."""


class MissingRestrictionError(SheafError):
    """An incident node-edge pair has no restriction map."""


class NormalizationError(SheafError):
    """A degree block cannot be inverted (isolated node or degenerate maps)."""


@dataclass(frozen=True)
class StalkConfig:
    """Uniform stalk sizes for all nodes and all edges.

    (1, N) collapses node spaces to scalars (attention-like), (N, 1)
    collapses edge spaces (convolution-like), and (N, N) is the full sheaf.
    """

    node_dim: int
    edge_dim: int

    def __post_init__(self):
        if self.node_dim < 1 or self.edge_dim < 1:
            raise SheafError(f"stalk dimensions must be >= 1, got {(self.node_dim, self.edge_dim)}")


@dataclass(frozen=True)
class RestrictionMap:
    """Linear map from the stalk of ``node`` into the stalk of ``edge``."""

    node: int
    edge: int
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class SheafStructure:
    """An oriented graph with per-incidence restriction maps.

    ``tail_maps[e]`` restricts the tail node of edge ``e`` into the edge
    stalk, ``head_maps[e]`` the head node.  Orientation is fixed at
    construction; the Laplacian does not depend on it, only the coboundary's
    signs do.
    """

    n_nodes: int
    tails: np.ndarray
    heads: np.ndarray
    stalks: StalkConfig
    tail_maps: np.ndarray  # (m, edge_dim, node_dim)
    head_maps: np.ndarray
    missing: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        m = len(self.tails)
        de, dv = self.stalks.edge_dim, self.stalks.node_dim
        if len(self.heads) != m:
            raise SheafError("tails and heads must have equal length")
        if self.tail_maps.shape != (m, de, dv) or self.head_maps.shape != (m, de, dv):
            raise SheafError(
                f"restriction maps must have shape {(m, de, dv)}, got "
                f"{self.tail_maps.shape} and {self.head_maps.shape}"
            )
        if m and (self.tails.min() < 0 or self.heads.min() < 0
                  or self.tails.max() >= self.n_nodes or self.heads.max() >= self.n_nodes):
            raise SheafError("edge endpoint outside the node range")
        if m and np.any(self.tails == self.heads):
            raise SheafError("self-loops are not supported")
        for arr in (self.tails, self.heads, self.tail_maps, self.head_maps):
            arr.setflags(write=False)

    @property
    def n_edges(self) -> int:
        return len(self.tails)

    @classmethod
    def from_restrictions(
        cls,
        n_nodes: int,
        edges: Sequence[tuple[int, int]],
        stalks: StalkConfig,
        restrictions: Iterable[RestrictionMap],
    ) -> "SheafStructure":
        """Assemble from explicit (node, edge) restriction maps.

        Missing incidences are tolerated here and rejected by
        :func:`build_coboundary`, which names the first offending pair.
        """
        m = len(edges)
        de, dv = stalks.edge_dim, stalks.node_dim
        tails = np.asarray([e[0] for e in edges], dtype=np.int64)
        heads = np.asarray([e[1] for e in edges], dtype=np.int64)
        tail_maps = np.zeros((m, de, dv))
        head_maps = np.zeros((m, de, dv))
        seen: set[tuple[int, int]] = set()
        for r in restrictions:
            key = (int(r.node), int(r.edge))
            if key in seen:
                raise SheafError(f"duplicate restriction map for node {key[0]} on edge {key[1]}")
            seen.add(key)
            mat = np.asarray(r.matrix, dtype=float)
            if mat.shape != (de, dv):
                raise SheafError(
                    f"restriction map for node {key[0]} on edge {key[1]} has shape "
                    f"{mat.shape}, expected {(de, dv)}"
                )
            if not 0 <= r.edge < m:
                raise SheafError(f"restriction map references unknown edge {r.edge}")
            if r.node == tails[r.edge]:
                tail_maps[r.edge] = mat
            elif r.node == heads[r.edge]:
                head_maps[r.edge] = mat
            else:
                raise SheafError(f"node {r.node} is not incident to edge {r.edge}")
        missing = []
        for e in range(m):
            if (int(tails[e]), e) not in seen:
                missing.append((int(tails[e]), e))
            if (int(heads[e]), e) not in seen:
                missing.append((int(heads[e]), e))
        return cls(
            n_nodes=n_nodes,
            tails=tails,
            heads=heads,
            stalks=stalks,
            tail_maps=tail_maps,
            head_maps=head_maps,
            missing=tuple(missing),
        )


def identity_sheaf(n_nodes: int, edges: Sequence[tuple[int, int]], dim: int = 1) -> SheafStructure:
    """All stalks ``dim``-dimensional, every restriction map the identity."""
    m = len(edges)
    eye = np.broadcast_to(np.eye(dim), (m, dim, dim)).copy()
    return SheafStructure(
        n_nodes=n_nodes,
        tails=np.asarray([e[0] for e in edges], dtype=np.int64),
        heads=np.asarray([e[1] for e in edges], dtype=np.int64),
        stalks=StalkConfig(dim, dim),
        tail_maps=eye,
        head_maps=eye.copy(),
    )


@dataclass(frozen=True, eq=False)
class Cochain0:
    """Node data: ``n_nodes`` stacked blocks of ``node_dim`` rows, f columns."""

    data: np.ndarray
    n_nodes: int
    node_dim: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.n_nodes * self.node_dim:
            raise SheafError(
                f"0-cochain must have {self.n_nodes * self.node_dim} rows, got shape {self.data.shape}"
            )

    def block(self, node: int) -> np.ndarray:
        d = self.node_dim
        return self.data[node * d:(node + 1) * d]


@dataclass(frozen=True, eq=False)
class Cochain1:
    """Edge data: ``n_edges`` stacked blocks of ``edge_dim`` rows."""

    data: np.ndarray
    n_edges: int
    edge_dim: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.n_edges * self.edge_dim:
            raise SheafError(
                f"1-cochain must have {self.n_edges * self.edge_dim} rows, got shape {self.data.shape}"
            )

    def block(self, edge: int) -> np.ndarray:
        d = self.edge_dim
        return self.data[edge * d:(edge + 1) * d]


@dataclass(frozen=True, eq=False)
class BlockSparseOperator:
    """Block matrix with one uniform block shape, stored as stacked dense blocks.

    Blocks with equal (row, col) coordinates accumulate, both in ``apply``
    and in ``dense``.
    """

    n_row_blocks: int
    n_col_blocks: int
    block_rows: int
    block_cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray  # (k, block_rows, block_cols)

    def __post_init__(self):
        k = len(self.row_idx)
        if len(self.col_idx) != k or self.blocks.shape != (k, self.block_rows, self.block_cols):
            raise SheafError(
                f"inconsistent operator storage: {k} rows, {len(self.col_idx)} cols, "
                f"blocks {self.blocks.shape}"
            )
        for arr in (self.row_idx, self.col_idx, self.blocks):
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_row_blocks * self.block_rows, self.n_col_blocks * self.block_cols)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Multiply onto a stacked matrix of shape (n_col_blocks * block_cols, f)."""
        x = np.asarray(x, dtype=float)
        vector = x.ndim == 1
        if vector:
            x = x[:, None]
        rows_in = self.n_col_blocks * self.block_cols
        if x.ndim != 2 or x.shape[0] != rows_in:
            raise SheafError(f"operand must have {rows_in} rows, got shape {x.shape}")
        x3 = x.reshape(self.n_col_blocks, self.block_cols, -1)
        prod = self.blocks @ x3[self.col_idx]
        out = scatter_add(prod, self.row_idx, self.n_row_blocks)
        out = out.reshape(self.n_row_blocks * self.block_rows, -1)
        return out[:, 0] if vector else out

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        br, bc = self.block_rows, self.block_cols
        for r, c, b in zip(self.row_idx, self.col_idx, self.blocks):
            out[r * br:(r + 1) * br, c * bc:(c + 1) * bc] += b
        return out

    def transpose(self) -> "BlockSparseOperator":
        return BlockSparseOperator(
            n_row_blocks=self.n_col_blocks,
            n_col_blocks=self.n_row_blocks,
            block_rows=self.block_cols,
            block_cols=self.block_rows,
            row_idx=self.col_idx,
            col_idx=self.row_idx,
            blocks=np.swapaxes(self.blocks, -1, -2).copy(),
        )

    def diagonal_blocks(self) -> np.ndarray:
        """Sum of blocks sitting on the block diagonal, zero where absent."""
        if self.n_row_blocks != self.n_col_blocks or self.block_rows != self.block_cols:
            raise SheafError("diagonal blocks require a square block layout")
        on_diag = self.row_idx == self.col_idx
        return scatter_add(self.blocks[on_diag], self.row_idx[on_diag], self.n_row_blocks)


def build_coboundary(sheaf: SheafStructure) -> BlockSparseOperator:
    """Oriented difference operator from node data to edge data.

    Edge block ``e`` evaluates ``head_map @ x_head - tail_map @ x_tail``.
    """
    if sheaf.missing:
        node, edge = sheaf.missing[0]
        raise MissingRestrictionError(f"no restriction map for node {node} on edge {edge}")
    m = sheaf.n_edges
    edge_ids = np.arange(m, dtype=np.int64)
    return BlockSparseOperator(
        n_row_blocks=m,
        n_col_blocks=sheaf.n_nodes,
        block_rows=sheaf.stalks.edge_dim,
        block_cols=sheaf.stalks.node_dim,
        row_idx=np.concatenate([edge_ids, edge_ids]),
        col_idx=np.concatenate([sheaf.heads, sheaf.tails]),
        blocks=np.concatenate([sheaf.head_maps, -sheaf.tail_maps]),
    )


def sheaf_laplacian(delta: BlockSparseOperator) -> BlockSparseOperator:
    """Gram operator ``delta^T delta`` assembled block by block.

    Diagonal block (v, v) sums ``B^T B`` over all of v's incidences; the
    (v, u) block for an edge between them is ``B_v^T B_u`` with the
    coboundary signs folded in, hence independent of orientation.
    """
    n = delta.n_col_blocks
    d = delta.block_cols
    diag = np.zeros((n, d, d))
    by_row: dict[int, list[int]] = {}
    for k, r in enumerate(delta.row_idx):
        by_row.setdefault(int(r), []).append(k)
    off: dict[tuple[int, int], np.ndarray] = {}
    for ks in by_row.values():
        for a in ks:
            va = int(delta.col_idx[a])
            ba = delta.blocks[a]
            diag[va] += ba.T @ ba
            for b in ks:
                if b == a:
                    continue
                vb = int(delta.col_idx[b])
                key = (va, vb)
                contrib = ba.T @ delta.blocks[b]
                if key in off:
                    off[key] = off[key] + contrib
                else:
                    off[key] = contrib
    row_idx = list(range(n)) + [k[0] for k in off]
    col_idx = list(range(n)) + [k[1] for k in off]
    blocks = np.concatenate([diag, np.asarray(list(off.values())).reshape(len(off), d, d)]) if off else diag
    return BlockSparseOperator(
        n_row_blocks=n,
        n_col_blocks=n,
        block_rows=d,
        block_cols=d,
        row_idx=np.asarray(row_idx, dtype=np.int64),
        col_idx=np.asarray(col_idx, dtype=np.int64),
        blocks=blocks,
    )


def normalized_sheaf_laplacian(L: BlockSparseOperator, eps: float = DEFAULT_EPS) -> BlockSparseOperator:
    """Symmetric block normalization ``D^(-1/2) L D^(-1/2)``.

    ``D`` is the block diagonal of ``L`` (one ``d x d`` block per node),
    inverted through its eigendecomposition after adding ``eps`` to every
    eigenvalue.  With ``eps = 0`` an isolated node or a degenerate set of
    restriction maps raises :class:`NormalizationError` naming the node.
    """
    D = L.diagonal_blocks()
    sym = 0.5 * (D + np.swapaxes(D, -1, -2))
    w, q = np.linalg.eigh(sym)
    scale = np.maximum(1.0, w.max(axis=-1))
    bad = np.nonzero(w.min(axis=-1) < -1e-8 * scale)[0]
    if bad.size:
        v = int(bad[0])
        raise NormalizationError(
            f"degree block of node {v} is not positive semidefinite (eigenvalue {w[v].min():.3e})"
        )
    lam = w + eps
    singular = np.nonzero(lam.min(axis=-1) <= 0.0)[0]
    if singular.size:
        v = int(singular[0])
        raise NormalizationError(
            f"degree block of node {v} is singular; isolated node or degenerate restriction maps"
        )
    inv_sqrt = (q * lam[..., None, :] ** -0.5) @ np.swapaxes(q, -1, -2)
    blocks = inv_sqrt[L.row_idx] @ L.blocks @ inv_sqrt[L.col_idx]
    return BlockSparseOperator(
        n_row_blocks=L.n_row_blocks,
        n_col_blocks=L.n_col_blocks,
        block_rows=L.block_rows,
        block_cols=L.block_cols,
        row_idx=L.row_idx.copy(),
        col_idx=L.col_idx.copy(),
        blocks=blocks,
    )


def apply_node_blocks(w1: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply ``w1`` to every node block of stacked data: (I_n (x) W1) @ x.

    The Kronecker product is never materialized; ``w1`` broadcasts over the
    node axis.
    """
    d = w1.shape[0]
    if w1.ndim != 2 or w1.shape[1] != d:
        raise SheafError(f"W1 must be square, got shape {w1.shape}")
    if x.shape[0] % d:
        raise SheafError(f"data rows {x.shape[0]} are not a multiple of the block size {d}")
    n = x.shape[0] // d
    return (w1 @ x.reshape(n, d, -1)).reshape(x.shape)


def diffusion_step(
    x: np.ndarray,
    normalized_laplacian: BlockSparseOperator,
    w1: np.ndarray,
    w2: np.ndarray,
    nonlinearity: str = "elu",
) -> np.ndarray:
    """One learned diffusion update ``x - sigma(Delta (I (x) W1) x W2)``.

    When ``W2`` changes the channel count (f1 != f2) the residual subtraction
    is dropped, since the update is only well-typed at equal channel counts;
    the model keeps channels constant, so that branch is defensive only.
    """
    x = np.asarray(x, dtype=float)
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    d = normalized_laplacian.block_cols
    if w1.shape != (d, d):
        raise SheafError(f"W1 must have shape {(d, d)}, got {w1.shape}")
    if x.ndim != 2 or x.shape[0] != normalized_laplacian.shape[1]:
        raise SheafError(
            f"data must have {normalized_laplacian.shape[1]} rows, got shape {x.shape}"
        )
    if w2.ndim != 2 or w2.shape[0] != x.shape[1]:
        raise SheafError(f"W2 must have {x.shape[1]} input channels, got shape {w2.shape}")
    try:
        sigma = ACTIVATIONS[nonlinearity][0]
    except KeyError:
        raise SheafError(f"unknown nonlinearity {nonlinearity!r}; choose from {sorted(ACTIVATIONS)}")
    y = apply_node_blocks(w1, x) @ w2
    y = sigma(normalized_laplacian.apply(y))
    if w2.shape[0] == w2.shape[1]:
        return x - y
    return -y


def unit_euler_step(x: np.ndarray, laplacian: BlockSparseOperator) -> np.ndarray:
    """Plain unit-step Euler update ``(I - Delta) x``, no learned weights."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != laplacian.shape[1]:
        raise SheafError(f"data must have {laplacian.shape[1]} rows, got shape {x.shape}")
    return x - laplacian.apply(x)
