"""Dense float32 kernels for the transformer forward pass.

Everything here operates on row-major float32 numpy arrays and is pure:
inputs are never mutated.  These kernels double as the float oracle for the
integer path in :mod:`fastnmt.quant8`, so reproducibility is part of their
contract:

* ``matmul`` and the reductions go through ``np.einsum``, which accumulates
  strictly in index order.  Two runs on identical inputs produce identical
  bits, and an output row never depends on which batch neighbours or padding
  rows it was stacked with (BLAS would not give either guarantee, since its
  blocking varies with the number of rows).
* ``softmax`` subtracts the per-slice maximum before exponentiation, so
  masked logits around ``-1e9`` underflow to exactly zero weight.

Performance is deliberately not the goal of this module; the fast path is
the packed 8-bit GEMM in ``quant8``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "as_tensor",
    "matmul",
    "softmax",
    "layer_norm_l2",
    "layer_norm_l1",
    "relu",
]

DEFAULT_EPS = 1e-6


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def as_tensor(data) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float32 array."""
    return np.ascontiguousarray(data, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a [m, k]`` and ``b [k, n]``.

    Accumulation order is fixed (einsum index order), so the result is
    bit-reproducible and each output element depends only on its own row of
    ``a`` and column of ``b``.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return np.einsum("ik,kj->ij", a, b)


def rowsum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis with in-order accumulation.

    Unlike ``np.sum`` (pairwise), appending exact zeros to the reduced axis
    cannot change the result bits, which keeps softmax independent of how
    much padding a batch carries.
    """
    return np.einsum("...k->...", x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    Each slice is shifted by its maximum before exponentiation, so inputs of
    any finite magnitude are safe and each output slice sums to 1.
    """
    x = np.asarray(x, dtype=np.float32)
    moved = np.moveaxis(x, axis, -1)
    shifted = moved - moved.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / rowsum(e)[..., None]
    return np.moveaxis(out, -1, axis)


def _row_mean(x: np.ndarray) -> np.ndarray:
    # float64 accumulation: exact for constant rows, so both norms send them
    # to bias exactly instead of eps-scaled rounding dust.
    return x.mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)


def _check_norm_params(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> None:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )


def layer_norm_l2(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Standard layer normalization over the last axis.

    Uses the population standard deviation (divide by d).  ``eps`` is added
    to the deviation so constant rows map exactly to ``bias``.
    """
    _check_norm_params(x, gain, bias)
    x = np.asarray(x, dtype=np.float32)
    mu = _row_mean(x)
    dev = x - mu
    std = np.sqrt(np.square(dev).mean(axis=-1, keepdims=True))
    return gain * dev / (std + np.float32(eps)) + bias


def layer_norm_l1(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Layer normalization by mean absolute deviation instead of std.

    y = gain * (x - mean) / (mad + eps) + bias, where mad is the mean of
    |x - mean| over the last axis.  Cheaper than the L2 variant (no sqrt)
    and scale-equivariant: scaling a row by c > 0 leaves the output
    unchanged (eps = 0).
    """
    _check_norm_params(x, gain, bias)
    x = np.asarray(x, dtype=np.float32)
    mu = _row_mean(x)
    dev = x - mu
    mad = np.abs(dev).mean(axis=-1, keepdims=True)
    return gain * dev / (mad + np.float32(eps)) + bias


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))
