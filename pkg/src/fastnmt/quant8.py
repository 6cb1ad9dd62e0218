"""Per-column 8-bit weight quantization, packing, and integer GEMM.

Weights are quantized one column at a time: column j of a weight matrix is
mapped to signed 8-bit integers with

    b_scale[j]     = 14 * sigma_j / 255
    b_zeropoint[j] = 127 - (mean_j + 7 * sigma_j) / b_scale[j]

so the range [mean - 7*sigma, mean + 7*sigma] covers [-128, 127] exactly and
anything outside saturates.  Activations are quantized per matrix to
unsigned 8-bit with

    a_scale     = (x_max - x_min) / 255
    a_zeropoint = 255 - x_max / a_scale

computed dynamically from the live input of each GEMM call.  Rounding is
half-away-from-zero everywhere so results are platform-independent.

The integer product

    C[i,j] = a_scale * b_scale[j] * sum_k (qa[i,k] - a_zp) * (qb[k,j] - b_zp[j])

is evaluated with the zeropoint cross-terms expanded against precomputed
row/column sums.  The remaining qa . qb core runs as float32 BLAS over
k-chunks of at most 512: every product of two 8-bit values is an integer
below 2**15 and any partial sum over a chunk stays below 2**24, so each
float32 operation is exact and the result is bit-identical to 32-bit
integer accumulation, independent of BLAS blocking or thread count.  The
documented operand bound is k <= 2**15 (the int32 framing); the float64
chunk accumulator is exact far beyond that.

Weight matrices are quantized and packed once at model load; only the
activations are quantized per call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

__all__ = [
    "QuantizedMatrix",
    "QuantizedActivations",
    "PackedMatrix",
    "column_stats",
    "quantize_weights",
    "quantize_activations",
    "dequantize_weights",
    "dequantize_activations",
    "pack",
    "unpack",
    "qgemm",
]

DEFAULT_PANEL_WIDTH = 8
DEFAULT_ROW_BLOCK = 32

# Largest k-chunk for which a float32 dot of 8-bit operands cannot round:
# 512 * 255 * 128 = 16,711,680 < 2**24.
_K_CHUNK = 512


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, halves away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass(frozen=True)
class QuantizedMatrix:
    """Signed 8-bit weights with per-column scale and zeropoint."""

    rows: int
    cols: int
    q: np.ndarray  # int8 [rows, cols]
    col_scale: np.ndarray  # float32 [cols], > 0
    col_zeropoint: np.ndarray  # float32 [cols]


@dataclass(frozen=True)
class QuantizedActivations:
    """Unsigned 8-bit activations with a single scale/zeropoint."""

    rows: int
    cols: int
    q: np.ndarray  # uint8 [rows, cols]
    scale: float
    zeropoint: float


@dataclass(frozen=True)
class PackedMatrix:
    """A QuantizedMatrix reordered into cache-friendly panels.

    ``payload`` groups the int8 values into column panels of ``panel_width``,
    each panel split into row blocks of ``row_block``, row-major inside a
    block; ``unpack`` restores the original matrix bit-exactly.  Per-column
    sums of q are precomputed for the zeropoint correction in ``qgemm``, and
    ``gemm_operand`` holds the kernel-ready float32 rendering of q so no
    per-call conversion of the weight side is needed.
    """

    rows: int
    cols: int
    panel_width: int
    row_block: int
    payload: np.ndarray  # int8 [rows * cols]
    col_scale: np.ndarray  # float32 [cols]
    col_zeropoint: np.ndarray  # float32 [cols]
    col_sums: np.ndarray  # int64 [cols]
    gemm_operand: np.ndarray  # float32 [rows, cols]


def column_stats(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population standard deviation (float64)."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] < 1:
        raise ShapeError(f"column_stats expects a [k, n] matrix, got {w.shape}")
    mean = w.mean(axis=0, dtype=np.float64)
    std = w.std(axis=0, dtype=np.float64)
    return mean, std


def quantize_weights(w: np.ndarray) -> QuantizedMatrix:
    """Quantize each column of ``w`` separately to signed 8-bit.

    Columns with zero spread get scale 1 and zeropoint -mean so the constant
    reconstructs exactly.  Scales/zeropoints are stored as float32 (the
    serialized form); q is computed from those stored values, which makes
    quantize-at-load identical to quantize-at-save.
    """
    w = np.asarray(w, dtype=np.float32)
    mean, std = column_stats(w)
    scale64 = 14.0 * std / 255.0
    scale = scale64.astype(np.float32)
    degenerate = ~(np.isfinite(scale) & (scale > 0))
    scale = np.where(degenerate, np.float32(1.0), scale)
    # 127 - (mean + 7*sigma)/scale with 7*sigma/scale = 255/2 cancelled
    # algebraically: the simplified form lands the half-integer zeropoint
    # exactly instead of an ulp to either side of it.
    zp64 = np.where(degenerate, -mean, -0.5 - mean / scale.astype(np.float64))
    zp = zp64.astype(np.float32)
    levels = round_half_away(
        w.astype(np.float64) / scale.astype(np.float64) + zp.astype(np.float64)
    )
    q = np.clip(levels, -128, 127).astype(np.int8)
    return QuantizedMatrix(
        rows=w.shape[0],
        cols=w.shape[1],
        q=_freeze(q),
        col_scale=_freeze(scale),
        col_zeropoint=_freeze(zp),
    )


def quantize_activations(x: np.ndarray) -> QuantizedActivations:
    """Quantize a matrix of activations to unsigned 8-bit.

    The scale spans the live min/max of the whole matrix, so x_min maps to 0
    and x_max to 255.  An all-constant matrix takes scale 1 with the formula
    continued, which clamps q to 255 and reconstructs the constant exactly.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.size == 0:
        raise ShapeError(f"quantize_activations expects a non-empty [m, k] matrix, got {x.shape}")
    x_max = float(x.max())
    x_min = float(x.min())
    if not np.isfinite(x_max) or not np.isfinite(x_min):
        raise ValueError("activations must be finite")
    if x_max == x_min:
        scale, zp = 1.0, 255.0 - x_max
    else:
        scale = (x_max - x_min) / 255.0
        zp = 255.0 - x_max / scale
    q = np.clip(round_half_away(x.astype(np.float64) / scale + zp), 0, 255).astype(np.uint8)
    return QuantizedActivations(
        rows=x.shape[0], cols=x.shape[1], q=_freeze(q), scale=scale, zeropoint=zp
    )


def dequantize_weights(qm: QuantizedMatrix) -> np.ndarray:
    """Reconstruct float weights: (q - zeropoint) * scale, per column."""
    zp = qm.col_zeropoint.astype(np.float64)[None, :]
    scale = qm.col_scale.astype(np.float64)[None, :]
    return ((qm.q.astype(np.float64) - zp) * scale).astype(np.float32)


def dequantize_activations(qa: QuantizedActivations) -> np.ndarray:
    """Reconstruct float activations: (q - zeropoint) * scale."""
    return ((qa.q.astype(np.float64) - qa.zeropoint) * qa.scale).astype(np.float32)


def _block_ranges(total: int, block: int):
    for start in range(0, total, block):
        yield start, min(start + block, total)


def pack(
    qm: QuantizedMatrix,
    panel_width: int = DEFAULT_PANEL_WIDTH,
    row_block: int = DEFAULT_ROW_BLOCK,
) -> PackedMatrix:
    """Reorder a quantized matrix into column panels of row blocks.

    Ragged right/bottom edges produce partial blocks; the permutation is
    exactly invertible by :func:`unpack` for any block geometry.
    """
    if panel_width < 1 or row_block < 1:
        raise ValueError("panel_width and row_block must be >= 1")
    payload = np.empty(qm.rows * qm.cols, dtype=np.int8)
    pos = 0
    for c0, c1 in _block_ranges(qm.cols, panel_width):
        for r0, r1 in _block_ranges(qm.rows, row_block):
            block = qm.q[r0:r1, c0:c1]
            payload[pos : pos + block.size] = block.ravel()
            pos += block.size
    return PackedMatrix(
        rows=qm.rows,
        cols=qm.cols,
        panel_width=panel_width,
        row_block=row_block,
        payload=_freeze(payload),
        col_scale=qm.col_scale,
        col_zeropoint=qm.col_zeropoint,
        col_sums=_freeze(qm.q.sum(axis=0, dtype=np.int64)),
        gemm_operand=_freeze(np.ascontiguousarray(qm.q, dtype=np.float32)),
    )


def unpack(pm: PackedMatrix) -> QuantizedMatrix:
    """Invert :func:`pack`, reproducing the original matrix bit-exactly."""
    q = np.empty((pm.rows, pm.cols), dtype=np.int8)
    pos = 0
    for c0, c1 in _block_ranges(pm.cols, pm.panel_width):
        for r0, r1 in _block_ranges(pm.rows, pm.row_block):
            size = (r1 - r0) * (c1 - c0)
            q[r0:r1, c0:c1] = pm.payload[pos : pos + size].reshape(r1 - r0, c1 - c0)
            pos += size
    return QuantizedMatrix(
        rows=pm.rows,
        cols=pm.cols,
        q=_freeze(q),
        col_scale=pm.col_scale,
        col_zeropoint=pm.col_zeropoint,
    )


def qgemm(a: QuantizedActivations, b: PackedMatrix) -> np.ndarray:
    """8-bit GEMM: float32 [m, n] result of dequantize(a) @ dequantize(b).

    The identity is algebraically exact; the only deviation from the original
    float GEMM is quantization error.  The integer core is order-independent
    (see module docstring), so results are bit-stable across batch sizes,
    padding, and thread counts.
    """
    if a.cols != b.rows:
        raise ShapeError(f"inner dimensions disagree: {a.rows}x{a.cols} times {b.rows}x{b.cols}")
    k = a.cols
    af = a.q.astype(np.float32)
    bf = b.gemm_operand
    acc = np.zeros((a.rows, b.cols), dtype=np.float64)
    for s in range(0, k, _K_CHUNK):
        e = min(s + _K_CHUNK, k)
        acc += af[:, s:e] @ bf[s:e, :]
    row_sums = a.q.sum(axis=1, dtype=np.int64).astype(np.float64)[:, None]
    col_sums = b.col_sums.astype(np.float64)[None, :]
    b_zp = b.col_zeropoint.astype(np.float64)[None, :]
    corrected = acc - b_zp * row_sums - a.zeropoint * col_sums + k * a.zeropoint * b_zp
    out_scale = a.scale * b.col_scale.astype(np.float64)[None, :]
    return (out_scale * corrected).astype(np.float32)
