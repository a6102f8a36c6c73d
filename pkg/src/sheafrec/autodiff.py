"""Minimal reverse-mode differentiation over a closed primitive set.

A :class:`Tape` records every primitive application in order; ``backward``
walks the records once in reverse, accumulating vector-Jacobian products.
The primitive set is intentionally closed: it covers exactly what the
diffusion model, its losses, and the test suite need, and every primitive is
individually checked against central finite differences.  Anything else
raises :class:`UnsupportedOperationError`.

:class:`ArrayBackend` exposes the same method set over plain numpy arrays, so
the model's forward pass can be written once and executed either recorded
(training) or unrecorded (evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .kernels import ACTIVATIONS


class UnsupportedOperationError(ValueError):
    """A primitive tag outside the closed set was requested."""


class Tensor:
    """A value on a tape.  Holds the array, the grad flag, and its tape id."""

    __slots__ = ("value", "requires_grad", "tid")

    def __init__(self, value: np.ndarray, requires_grad: bool, tid: int):
        self.value = value
        self.requires_grad = requires_grad
        self.tid = tid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad}, tid={self.tid})"


@dataclass
class _Record:
    op: str
    out_tid: int
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class GradientStore:
    """Maps tensors to d(loss)/d(tensor).

    Tensors the loss never touched get a zero gradient of matching shape.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.tid)
        return g if g is not None else np.zeros_like(t.value)

    def __contains__(self, t: Tensor) -> bool:
        return t.tid in self._grads


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class ArrayBackend:
    """Plain-numpy twin of :class:`Tape`: same method set, no recording."""

    @staticmethod
    def tensor(value, requires_grad: bool = False) -> np.ndarray:
        return np.asarray(value, dtype=float)

    @staticmethod
    def value(t: np.ndarray) -> np.ndarray:
        return t

    @staticmethod
    def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False):
        aa = _swap(a) if transpose_a else a
        bb = _swap(b) if transpose_b else b
        _check_matmul(aa, bb)
        return aa @ bb

    @staticmethod
    def add(a, b):
        _check_add(a, b)
        return a + b

    @staticmethod
    def sub(a, b):
        _check_same_shape("sub", a, b)
        return a - b

    @staticmethod
    def mul(a, b):
        _check_same_shape("mul", a, b)
        return a * b

    @staticmethod
    def scale(a, s):
        return a * (s if np.isscalar(s) else np.asarray(s))

    @staticmethod
    def gather(a, index):
        return a[np.asarray(index)]

    @staticmethod
    def scatter_add(a, index, n_rows: int):
        return kernels.scatter_add(a, np.asarray(index), n_rows)

    @staticmethod
    def activation(name: str, a):
        return _activation_pair(name)[0](a)

    @staticmethod
    def log(a):
        return np.log(a)

    @staticmethod
    def sigmoid(a):
        return kernels.sigmoid(a)

    @staticmethod
    def softplus(a):
        return kernels.softplus(a)

    @staticmethod
    def sqrt(a):
        return np.sqrt(a)

    @staticmethod
    def square(a):
        return a * a

    @staticmethod
    def sum(a, axis=None):
        return np.sum(a, axis=axis)

    @staticmethod
    def mean(a, axis=None):
        return np.mean(a, axis=axis)

    @staticmethod
    def concat(parts: Sequence, axis: int = 0):
        return np.concatenate(list(parts), axis=axis)

    @staticmethod
    def reshape(a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def sparse_block_apply(blocks, x, row_index, col_index, n_rows: int):
        _check_sparse_apply(blocks, x, row_index, col_index)
        prod = blocks[...] @ x[np.asarray(col_index)]
        return kernels.scatter_add(prod, np.asarray(row_index), n_rows)

    @staticmethod
    def sym_inv_sqrt(a, eps: float = 1e-6):
        y, _ = kernels.sym_inv_sqrt(a, eps)
        return y


def _activation_pair(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise UnsupportedOperationError(
            f"unknown activation {name!r}; supported: {sorted(ACTIVATIONS)}"
        ) from None


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ValueError(f"matmul expects two 2-D or two 3-D operands, got {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul batch sizes differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")


def _check_add(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return  # row-broadcast bias
    raise ValueError(f"add expects equal shapes or a row-broadcast bias, got {a.shape} + {b.shape}")


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op} expects equal shapes, got {a.shape} vs {b.shape}")


def _check_sparse_apply(blocks, x, row_index, col_index) -> None:
    if blocks.ndim != 3 or x.ndim != 3:
        raise ValueError(
            f"sparse_block_apply expects blocks (k,p,q) and x (n,q,f), got {blocks.shape}, {x.shape}"
        )
    if blocks.shape[-1] != x.shape[-2]:
        raise ValueError(f"block columns {blocks.shape} do not match x rows {x.shape}")
    if len(row_index) != blocks.shape[0] or len(col_index) != blocks.shape[0]:
        raise ValueError("index arrays must have one entry per block")


class Tape:
    """Records primitives applied to tensors; replays them in reverse."""

    def __init__(self):
        self._records: list[_Record] = []
        self._count = 0

    # ------------------------------------------------------------------
    # construction

    def tensor(self, value, requires_grad: bool = False) -> Tensor:
        arr = np.asarray(value, dtype=float)
        tid = self._count
        self._count += 1
        return Tensor(arr, bool(requires_grad), tid)

    @staticmethod
    def value(t: Tensor) -> np.ndarray:
        return t.value

    def _emit(self, op: str, inputs: tuple[Tensor, ...], value: np.ndarray, vjp) -> Tensor:
        out = self.tensor(value, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self._records.append(_Record(op, out.tid, inputs, vjp))
        return out

    # ------------------------------------------------------------------
    # primitives

    def matmul(self, a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
        aa = _swap(a.value) if transpose_a else a.value
        bb = _swap(b.value) if transpose_b else b.value
        _check_matmul(aa, bb)
        out = aa @ bb

        def vjp(g):
            ga = gb = None
            if a.requires_grad:
                d = g @ _swap(bb)
                ga = _swap(d) if transpose_a else d
            if b.requires_grad:
                d = _swap(aa) @ g
                gb = _swap(d) if transpose_b else d
            return ga, gb

        return self._emit("matmul", (a, b), out, vjp)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _check_add(a.value, b.value)
        bias = a.value.shape != b.value.shape

        def vjp(g):
            return g, (g.sum(axis=0) if bias else g)

        return self._emit("add", (a, b), a.value + b.value, vjp)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same_shape("sub", a.value, b.value)

        def vjp(g):
            return g, -g

        return self._emit("sub", (a, b), a.value - b.value, vjp)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same_shape("mul", a.value, b.value)
        av, bv = a.value, b.value

        def vjp(g):
            return g * bv, g * av

        return self._emit("mul", (a, b), av * bv, vjp)

    def scale(self, a: Tensor, s) -> Tensor:
        """Multiply by a python scalar or by a single-element tensor."""
        if isinstance(s, Tensor):
            if s.value.size != 1:
                raise ValueError(f"scale expects a single-element scalar, got shape {s.value.shape}")
            av, sv = a.value, s.value

            def vjp(g):
                ga = g * sv if a.requires_grad else None
                gs = np.sum(g * av).reshape(sv.shape) if s.requires_grad else None
                return ga, gs

            return self._emit("scale", (a, s), av * sv, vjp)

        c = float(s)

        def vjp_const(g):
            return (g * c,)

        return self._emit("scale", (a,), a.value * c, vjp_const)

    def gather(self, a: Tensor, index) -> Tensor:
        idx = np.asarray(index)
        n = a.value.shape[0]

        def vjp(g):
            return (kernels.scatter_add(g, idx, n),)

        return self._emit("block-gather", (a,), a.value[idx], vjp)

    def scatter_add(self, a: Tensor, index, n_rows: int) -> Tensor:
        idx = np.asarray(index)

        def vjp(g):
            return (g[idx],)

        return self._emit("block-scatter", (a,), kernels.scatter_add(a.value, idx, n_rows), vjp)

    def activation(self, name: str, a: Tensor) -> Tensor:
        fn, dfn = _activation_pair(name)
        av = a.value

        def vjp(g):
            return (g * dfn(av),)

        return self._emit(name, (a,), fn(av), vjp)

    def log(self, a: Tensor) -> Tensor:
        av = a.value

        def vjp(g):
            return (g / av,)

        return self._emit("log", (a,), np.log(av), vjp)

    def sigmoid(self, a: Tensor) -> Tensor:
        out = kernels.sigmoid(a.value)

        def vjp(g):
            return (g * out * (1.0 - out),)

        return self._emit("sigmoid", (a,), out, vjp)

    def softplus(self, a: Tensor) -> Tensor:
        av = a.value

        def vjp(g):
            return (g * kernels.sigmoid(av),)

        return self._emit("softplus", (a,), kernels.softplus(av), vjp)

    def sqrt(self, a: Tensor) -> Tensor:
        out = np.sqrt(a.value)

        def vjp(g):
            return (g * 0.5 / out,)

        return self._emit("sqrt", (a,), out, vjp)

    def square(self, a: Tensor) -> Tensor:
        av = a.value

        def vjp(g):
            return (g * 2.0 * av,)

        return self._emit("square", (a,), av * av, vjp)

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        shape = a.value.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._emit("sum", (a,), np.sum(a.value, axis=axis), vjp)

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        shape = a.value.shape
        count = a.value.size if axis is None else shape[axis]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / count, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

        return self._emit("mean", (a,), np.mean(a.value, axis=axis), vjp)

    def concat(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        parts = tuple(parts)
        sizes = [p.value.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        out = np.concatenate([p.value for p in parts], axis=axis)
        return self._emit("concat", parts, out, vjp)

    def reshape(self, a: Tensor, shape) -> Tensor:
        old = a.value.shape

        def vjp(g):
            return (g.reshape(old),)

        return self._emit("reshape", (a,), a.value.reshape(shape), vjp)

    def sparse_block_apply(self, blocks: Tensor, x: Tensor, row_index, col_index, n_rows: int) -> Tensor:
        """y[r] += blocks[k] @ x[col_index[k]] for every k with row_index[k] == r.

        Differentiates through both the block values and the dense operand.
        """
        bv, xv = blocks.value, x.value
        _check_sparse_apply(bv, xv, row_index, col_index)
        ridx = np.asarray(row_index)
        cidx = np.asarray(col_index)
        out = kernels.scatter_add(bv @ xv[cidx], ridx, n_rows)

        def vjp(g):
            ge = g[ridx]
            gb = ge @ _swap(xv[cidx]) if blocks.requires_grad else None
            gx = kernels.scatter_add(_swap(bv) @ ge, cidx, xv.shape[0]) if x.requires_grad else None
            return gb, gx

        return self._emit("sparse-block-apply", (blocks, x), out, vjp)

    def sym_inv_sqrt(self, a: Tensor, eps: float = 1e-6) -> Tensor:
        out, cache = kernels.sym_inv_sqrt(a.value, eps)

        def vjp(g):
            return (kernels.sym_inv_sqrt_vjp(g, cache),)

        return self._emit("sym-inv-sqrt", (a,), out, vjp)

    # ------------------------------------------------------------------
    # dispatch by primitive tag

    _DISPATCH = {
        "matmul": "matmul",
        "add": "add",
        "sub": "sub",
        "mul": "mul",
        "scale": "scale",
        "block-gather": "gather",
        "block-scatter": "scatter_add",
        "log": "log",
        "sigmoid": "sigmoid",
        "softplus": "softplus",
        "sqrt": "sqrt",
        "square": "square",
        "sum": "sum",
        "mean": "mean",
        "concat": "concat",
        "reshape": "reshape",
        "sparse-block-apply": "sparse_block_apply",
        "sym-inv-sqrt": "sym_inv_sqrt",
    }

    def record(self, op: str, *args, **kwargs) -> Tensor:
        """Apply a primitive by tag.  Unknown tags are a hard error."""
        if op in ACTIVATIONS:
            return self.activation(op, *args, **kwargs)
        method = self._DISPATCH.get(op)
        if method is None:
            supported = sorted(self._DISPATCH) + sorted(ACTIVATIONS)
            raise UnsupportedOperationError(f"unsupported primitive {op!r}; supported: {supported}")
        return getattr(self, method)(*args, **kwargs)

    # ------------------------------------------------------------------
    # reverse pass

    def backward(self, loss: Tensor) -> GradientStore:
        """Gradients of a scalar loss with respect to every recorded tensor."""
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.value)}
        for rec in reversed(self._records):
            g = grads.get(rec.out_tid)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(t.tid)
                grads[t.tid] = gi if acc is None else acc + gi
        return GradientStore(grads)

    def __len__(self) -> int:
        return len(self._records)
