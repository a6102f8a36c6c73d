"""Numerical kernels shared by the plain-array and the recorded execution paths.

Keeping one definition of each nonlinearity, the stable softplus/sigmoid, the
block scatter, and the blockwise symmetric inverse square root guarantees that
the differentiable forward pass and the plain evaluation pass compute the same
numbers.
"""

from __future__ import annotations

import numpy as np


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(float)


def tanh_grad(z: np.ndarray) -> np.ndarray:
    t = np.tanh(z)
    return 1.0 - t * t


#: name -> (function, derivative)
ACTIVATIONS: dict[str, tuple] = {
    "elu": (elu, elu_grad),
    "relu": (relu, relu_grad),
    "tanh": (np.tanh, tanh_grad),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


def sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow for large |x|."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def scatter_add(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``values[k]`` into row ``index[k]`` of a fresh (n_rows, ...) array.

    Implemented over ``bincount`` (one bin per output element), which is far
    faster than ``np.add.at`` and just as deterministic.
    """
    tail = values.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    if len(index) == 0 or width == 0:
        return np.zeros((n_rows,) + tail, dtype=float)
    flat_index = (np.asarray(index, dtype=np.int64)[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(flat_index, weights=values.reshape(len(index), width).ravel(),
                      minlength=n_rows * width)
    return out.reshape((n_rows,) + tail)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def sym_inv_sqrt(blocks: np.ndarray, eps: float):
    """(sym(B) + eps*I)^(-1/2) for every trailing (d, d) block.

    The input is symmetrized first, so callers may pass Gram matrices whose
    off-diagonal halves differ by round-off.  Returns the result plus the
    eigendecomposition cache needed for the reverse pass.  Raises ValueError
    when some shifted eigenvalue is not positive.
    """
    b = np.asarray(blocks, dtype=float)
    if b.shape[-1] != b.shape[-2]:
        raise ValueError(f"expected square blocks, got shape {b.shape}")
    sym = 0.5 * (b + _swap(b))
    w, q = np.linalg.eigh(sym)
    lam = w + eps
    if np.any(lam <= 0.0):
        raise ValueError(
            f"block eigenvalue {float(lam.min())} is not positive after adding eps={eps}"
        )
    f = lam ** -0.5
    y = (q * f[..., None, :]) @ _swap(q)
    return y, (w, q, lam, f)


def sym_inv_sqrt_vjp(grad: np.ndarray, cache) -> np.ndarray:
    """Reverse-mode rule for :func:`sym_inv_sqrt`.

    Uses the Daleckii-Krein divided-difference form; coincident eigenvalues
    fall back to the derivative at the midpoint, which is the correct limit.
    """
    w, q, lam, f = cache
    qt = _swap(q)
    dl = w[..., :, None] - w[..., None, :]
    df = f[..., :, None] - f[..., None, :]
    mid = -0.5 * (0.5 * (lam[..., :, None] + lam[..., None, :])) ** -1.5
    scale = np.maximum(1.0, np.abs(w).max(axis=-1))[..., None, None]
    close = np.abs(dl) <= 1e-12 * scale
    k = np.where(close, mid, df / np.where(close, 1.0, dl))
    g = qt @ grad @ q
    m = q @ (k * g) @ qt
    return 0.5 * (m + _swap(m))
