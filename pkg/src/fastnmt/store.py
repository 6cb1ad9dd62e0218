"""Binary model files: save, load, inspect, and random-model generation.

Layout (all integers little-endian):

    magic "FNMT" | u32 version
    config block: 9 x u32 (enc layers, dec layers, d_model, enc heads,
                  dec heads, ffn_enc, ffn_dec, vocab, max_positions)
                  + u8 norm variant (0=l2, 1=l1) + u8 shared flag
    vocab block:  u32 count, then per token u16 length + UTF-8 bytes
                  (ids are implicit file order, specials first)
    directory:    u32 count, then per tensor u16 name length + name,
                  u8 dtype (0=f32, 1=quantized int8), u8 ndim,
                  ndim x u32 dims, u64 absolute offset, u64 byte length
    payload

An f32 entry is raw float32, row-major.  A quantized entry stores the
per-column scale array (f32), the per-column zeropoint array (f32), then
the raw signed 8-bit values, row-major.  With shared embeddings the
"tgt_embed" and "out_proj" entries alias the "src_embed" byte range (the
output projection reads that table transposed); the embedding itself always
stays f32 because lookup runs in float, so an int8 file quantizes the
shared projection at load -- which is bit-identical to quantizing at save
because quantization is deterministic from the stored f32 data.

Saving is deterministic: identical weights produce identical bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import quant8
from .model import (
    AttentionBlock,
    DecoderLayer,
    EncoderLayer,
    FeedForward,
    ModelConfig,
    NormParams,
    Projection,
    Weights,
    NORM_L1,
    NORM_L2,
    sinusoid_positions,
)
from .quant8 import QuantizedMatrix
from .textpipe import SPECIAL_TOKENS, Vocabulary

MAGIC = b"FNMT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_QINT8 = 1

PRECISION_F32 = "f32"
PRECISION_INT8 = "int8"
PRECISIONS = (PRECISION_F32, PRECISION_INT8)


class ModelFormatError(ValueError):
    """The file is not a valid model of a supported version."""


# --- tensor naming -----------------------------------------------------------


def _attn_names(prefix: str, d: int):
    for part in ("q", "k", "v", "o"):
        yield f"{prefix}.{part}_w", "gemm", (d, d)
        yield f"{prefix}.{part}_b", "plain", (d,)


def _norm_names(prefix: str, d: int):
    yield f"{prefix}.gain", "plain", (d,)
    yield f"{prefix}.bias", "plain", (d,)


def _ffn_names(prefix: str, d: int, ffn: int):
    yield f"{prefix}.w1", "gemm", (d, ffn)
    yield f"{prefix}.b1", "plain", (ffn,)
    yield f"{prefix}.w2", "gemm", (ffn, d)
    yield f"{prefix}.b2", "plain", (d,)


def tensor_manifest(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind, logical shape) for every tensor the config requires.

    kind "embed" is always f32; "gemm" weights are the int8 candidates;
    "out_proj" is a gemm weight stored [vocab, d] in f32 form so it can
    alias the embedding.
    """
    d, v = cfg.d_model, cfg.vocab_size
    names: list[tuple[str, str, tuple[int, ...]]] = [
        ("src_embed", "embed", (v, d)),
        ("tgt_embed", "embed", (v, d)),
        ("out_proj", "out_proj", (v, d)),
        ("out_bias", "plain", (v,)),
    ]
    for i in range(cfg.n_enc_layers):
        names.extend(_attn_names(f"enc.{i}.attn", d))
        names.extend(_norm_names(f"enc.{i}.norm1", d))
        names.extend(_ffn_names(f"enc.{i}.ffn", d, cfg.ffn_dim_enc))
        names.extend(_norm_names(f"enc.{i}.norm2", d))
    for i in range(cfg.n_dec_layers):
        names.extend(_attn_names(f"dec.{i}.self", d))
        names.extend(_norm_names(f"dec.{i}.norm1", d))
        names.extend(_attn_names(f"dec.{i}.cross", d))
        names.extend(_norm_names(f"dec.{i}.norm2", d))
        if cfg.ffn_dim_dec > 0:
            names.extend(_ffn_names(f"dec.{i}.ffn", d, cfg.ffn_dim_dec))
            names.extend(_norm_names(f"dec.{i}.norm3", d))
    return names


# --- weights <-> flat arrays -------------------------------------------------


def _proj_float(proj: Projection) -> np.ndarray:
    """Float32 [k, n] view of a projection weight, dequantizing if needed."""
    if proj.quantized:
        return quant8.dequantize_weights(quant8.unpack(proj.weight))
    return np.asarray(proj.weight, dtype=np.float32)


def _proj_quantized(proj: Projection) -> QuantizedMatrix:
    if proj.quantized:
        return quant8.unpack(proj.weight)
    return quant8.quantize_weights(np.asarray(proj.weight, dtype=np.float32))


def flatten_weights(cfg: ModelConfig, weights: Weights) -> dict[str, object]:
    """Name -> float ndarray (or Projection for gemm kinds) in manifest order."""
    out: dict[str, object] = {
        "src_embed": weights.src_embed,
        "tgt_embed": weights.tgt_embed,
        "out_proj": weights.out_proj,
        "out_bias": weights.out_proj.bias,
    }
    for i, layer in enumerate(weights.enc_layers):
        _flatten_attn(out, f"enc.{i}.attn", layer.attn)
        _flatten_norm(out, f"enc.{i}.norm1", layer.norm1)
        _flatten_ffn(out, f"enc.{i}.ffn", layer.ffn)
        _flatten_norm(out, f"enc.{i}.norm2", layer.norm2)
    for i, layer in enumerate(weights.dec_layers):
        _flatten_attn(out, f"dec.{i}.self", layer.self_attn)
        _flatten_norm(out, f"dec.{i}.norm1", layer.norm1)
        _flatten_attn(out, f"dec.{i}.cross", layer.cross_attn)
        _flatten_norm(out, f"dec.{i}.norm2", layer.norm2)
        if layer.ffn is not None:
            _flatten_ffn(out, f"dec.{i}.ffn", layer.ffn)
            _flatten_norm(out, f"dec.{i}.norm3", layer.norm3)
    return out


def _flatten_attn(out, prefix, attn: AttentionBlock):
    for part, proj in zip("qkvo", (attn.q, attn.k, attn.v, attn.o)):
        out[f"{prefix}.{part}_w"] = proj
        out[f"{prefix}.{part}_b"] = proj.bias


def _flatten_norm(out, prefix, norm: NormParams):
    out[f"{prefix}.gain"] = norm.gain
    out[f"{prefix}.bias"] = norm.bias


def _flatten_ffn(out, prefix, ffn: FeedForward):
    out[f"{prefix}.w1"] = ffn.w1
    out[f"{prefix}.b1"] = ffn.w1.bias
    out[f"{prefix}.w2"] = ffn.w2
    out[f"{prefix}.b2"] = ffn.w2.bias


def _make_projection(weight, bias, precision: str) -> Projection:
    """Build the runtime projection at the requested precision.

    ``weight`` is a float32 [k, n] array or a QuantizedMatrix read from an
    int8 file.
    """
    bias = np.asarray(bias, dtype=np.float32)
    if precision == PRECISION_INT8:
        qm = weight if isinstance(weight, QuantizedMatrix) else quant8.quantize_weights(weight)
        return Projection(weight=quant8.pack(qm), bias=bias)
    if isinstance(weight, QuantizedMatrix):
        weight = quant8.dequantize_weights(weight)
    return Projection(weight=np.asarray(weight, dtype=np.float32), bias=bias)


def assemble_weights(cfg: ModelConfig, arrays: dict[str, object], precision: str) -> Weights:
    """Inverse of :func:`flatten_weights` over raw arrays/QuantizedMatrix."""
    src_embed = np.asarray(arrays["src_embed"], dtype=np.float32)
    tgt_embed = np.asarray(arrays["tgt_embed"], dtype=np.float32)
    out_w = arrays["out_proj"]
    if isinstance(out_w, QuantizedMatrix):
        out_proj = _make_projection(out_w, arrays["out_bias"], precision)
    else:
        # Stored [vocab, d]; the projection consumes it transposed.
        out_proj = _make_projection(
            np.asarray(out_w, dtype=np.float32).T, arrays["out_bias"], precision
        )

    def attn(prefix: str) -> AttentionBlock:
        projs = {
            part: _make_projection(arrays[f"{prefix}.{part}_w"],
                                   arrays[f"{prefix}.{part}_b"], precision)
            for part in "qkvo"
        }
        return AttentionBlock(q=projs["q"], k=projs["k"], v=projs["v"], o=projs["o"])

    def norm(prefix: str) -> NormParams:
        return NormParams(
            gain=np.asarray(arrays[f"{prefix}.gain"], dtype=np.float32),
            bias=np.asarray(arrays[f"{prefix}.bias"], dtype=np.float32),
        )

    def ffn(prefix: str) -> FeedForward:
        return FeedForward(
            w1=_make_projection(arrays[f"{prefix}.w1"], arrays[f"{prefix}.b1"], precision),
            w2=_make_projection(arrays[f"{prefix}.w2"], arrays[f"{prefix}.b2"], precision),
        )

    enc_layers = [
        EncoderLayer(
            attn=attn(f"enc.{i}.attn"),
            norm1=norm(f"enc.{i}.norm1"),
            ffn=ffn(f"enc.{i}.ffn"),
            norm2=norm(f"enc.{i}.norm2"),
        )
        for i in range(cfg.n_enc_layers)
    ]
    dec_layers = []
    for i in range(cfg.n_dec_layers):
        has_ffn = cfg.ffn_dim_dec > 0
        dec_layers.append(
            DecoderLayer(
                self_attn=attn(f"dec.{i}.self"),
                norm1=norm(f"dec.{i}.norm1"),
                cross_attn=attn(f"dec.{i}.cross"),
                norm2=norm(f"dec.{i}.norm2"),
                ffn=ffn(f"dec.{i}.ffn") if has_ffn else None,
                norm3=norm(f"dec.{i}.norm3") if has_ffn else None,
            )
        )
    return Weights(
        src_embed=src_embed,
        tgt_embed=tgt_embed,
        out_proj=out_proj,
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        positions=sinusoid_positions(cfg.max_positions, cfg.d_model),
    )


# --- serialization -----------------------------------------------------------


def _config_bytes(cfg: ModelConfig) -> bytes:
    return struct.pack(
        "<9I2B",
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.d_model,
        cfg.n_heads_enc,
        cfg.n_heads_dec,
        cfg.ffn_dim_enc,
        cfg.ffn_dim_dec,
        cfg.vocab_size,
        cfg.max_positions,
        1 if cfg.norm_variant == NORM_L1 else 0,
        1 if cfg.shared_embeddings else 0,
    )


def _vocab_bytes(vocab: Vocabulary) -> bytes:
    parts = [struct.pack("<I", len(vocab))]
    for token in vocab.all_tokens():
        raw = token.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def _qmatrix_bytes(qm: QuantizedMatrix) -> bytes:
    return (
        qm.col_scale.astype("<f4").tobytes()
        + qm.col_zeropoint.astype("<f4").tobytes()
        + np.ascontiguousarray(qm.q).tobytes()
    )


def save(
    weights: Weights,
    cfg: ModelConfig,
    path,
    precision: str = PRECISION_F32,
    vocab: Vocabulary | None = None,
) -> None:
    """Write a model file; int8 mode pre-quantizes every GEMM weight."""
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}")
    if vocab is None:
        vocab = Vocabulary()
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} entries, config says {cfg.vocab_size}")
    flat = flatten_weights(cfg, weights)

    payloads: list[tuple[str, int, tuple[int, ...], bytes | None, str | None]] = []
    for name, kind, shape in tensor_manifest(cfg):
        if cfg.shared_embeddings and name in ("tgt_embed", "out_proj"):
            payloads.append((name, DTYPE_F32, shape, None, "src_embed"))
            continue
        value = flat[name]
        if kind == "gemm" and precision == PRECISION_INT8:
            qm = _proj_quantized(value)
            payloads.append((name, DTYPE_QINT8, (qm.rows, qm.cols), _qmatrix_bytes(qm), None))
        elif kind == "out_proj":
            if precision == PRECISION_INT8:
                qm = _proj_quantized(value)  # [d, vocab] orientation
                payloads.append((name, DTYPE_QINT8, (qm.rows, qm.cols), _qmatrix_bytes(qm), None))
            else:
                arr = np.ascontiguousarray(_proj_float(value).T)  # store [vocab, d]
                payloads.append((name, DTYPE_F32, shape, arr.astype("<f4").tobytes(), None))
        elif kind == "gemm":
            arr = _proj_float(value)
            payloads.append((name, DTYPE_F32, shape, arr.astype("<f4").tobytes(), None))
        else:
            arr = np.asarray(value, dtype=np.float32)
            payloads.append((name, DTYPE_F32, shape, arr.astype("<f4").tobytes(), None))

    header = MAGIC + struct.pack("<I", VERSION) + _config_bytes(cfg) + _vocab_bytes(vocab)
    dir_parts = [struct.pack("<I", len(payloads))]
    fixed = 0
    for name, dtype, shape, blob, _ in payloads:
        fixed += 2 + len(name.encode("utf-8")) + 1 + 1 + 4 * len(shape) + 8 + 8
    payload_start = len(header) + 4 + fixed

    offsets: dict[str, tuple[int, int]] = {}
    cursor = payload_start
    blobs: list[bytes] = []
    for name, dtype, shape, blob, alias in payloads:
        if alias is not None:
            off, nbytes = offsets[alias]
        else:
            off, nbytes = cursor, len(blob)
            cursor += nbytes
            blobs.append(blob)
        offsets[name] = (off, nbytes)
        raw = name.encode("utf-8")
        dir_parts.append(
            struct.pack("<H", len(raw))
            + raw
            + struct.pack("<2B", dtype, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape)
            + struct.pack("<2Q", off, nbytes)
        )

    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(b"".join(dir_parts))
            for blob in blobs:
                f.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write model to {path}: {exc}") from exc


@dataclass(frozen=True)
class DirEntry:
    name: str
    dtype: int
    shape: tuple[int, ...]
    offset: int
    nbytes: int


def _read_header(buf: bytes, path) -> tuple[ModelConfig, Vocabulary, list[DirEntry], int]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    pos = 8
    fields = struct.unpack_from("<9I2B", buf, pos)
    pos += struct.calcsize("<9I2B")
    cfg = ModelConfig(
        n_enc_layers=fields[0],
        n_dec_layers=fields[1],
        d_model=fields[2],
        n_heads_enc=fields[3],
        n_heads_dec=fields[4],
        ffn_dim_enc=fields[5],
        ffn_dim_dec=fields[6],
        vocab_size=fields[7],
        max_positions=fields[8],
        norm_variant=NORM_L1 if fields[9] else NORM_L2,
        shared_embeddings=bool(fields[10]),
    )
    (vocab_count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tokens = []
    for _ in range(vocab_count):
        (tlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        tokens.append(buf[pos : pos + tlen].decode("utf-8"))
        pos += tlen
    if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
        raise ModelFormatError(f"{path}: vocabulary lacks the special tokens")
    vocab = Vocabulary(tokens[len(SPECIAL_TOKENS) :])
    if len(vocab) != cfg.vocab_size:
        raise ModelFormatError(
            f"{path}: vocabulary size {len(vocab)} != config vocab {cfg.vocab_size}"
        )
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dtype, ndim = struct.unpack_from("<2B", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<2Q", buf, pos)
        pos += 16
        entries.append(DirEntry(name, dtype, tuple(shape), offset, nbytes))
    return cfg, vocab, entries, pos


def _expected_nbytes(dtype: int, shape: tuple[int, ...]) -> int:
    count = math.prod(shape)
    if dtype == DTYPE_F32:
        return 4 * count
    rows, cols = shape
    return 8 * cols + rows * cols


def _validate_entries(cfg: ModelConfig, entries: list[DirEntry], file_size: int, path) -> None:
    required = {name for name, _, _ in tensor_manifest(cfg)}
    seen = {}
    for e in entries:
        if e.name in seen:
            raise ModelFormatError(f"{path}: duplicate tensor {e.name}")
        seen[e.name] = e
    missing = required - seen.keys()
    if missing:
        raise ModelFormatError(f"{path}: missing tensor {sorted(missing)[0]}")
    unexpected = seen.keys() - required
    if unexpected:
        raise ModelFormatError(f"{path}: unexpected tensor {sorted(unexpected)[0]}")
    for e in entries:
        if e.dtype not in (DTYPE_F32, DTYPE_QINT8):
            raise ModelFormatError(f"{path}: tensor {e.name} has unknown dtype {e.dtype}")
        if e.nbytes != _expected_nbytes(e.dtype, e.shape):
            raise ModelFormatError(f"{path}: tensor {e.name} has inconsistent byte length")
        if e.offset + e.nbytes > file_size:
            raise ModelFormatError(f"{path}: tensor {e.name} is truncated")
    spans = sorted((e.offset, e.nbytes, e.name) for e in entries)
    for (o1, n1, name1), (o2, n2, name2) in zip(spans, spans[1:]):
        if o1 == o2 and n1 == n2:
            continue  # exact alias (shared embeddings)
        if o2 < o1 + n1:
            raise ModelFormatError(f"{path}: tensors {name1} and {name2} overlap")


def _entry_array(buf: bytes, e: DirEntry):
    if e.dtype == DTYPE_F32:
        arr = np.frombuffer(buf, dtype="<f4", count=math.prod(e.shape), offset=e.offset)
        return arr.reshape(e.shape)
    rows, cols = e.shape
    scale = np.frombuffer(buf, dtype="<f4", count=cols, offset=e.offset)
    zp = np.frombuffer(buf, dtype="<f4", count=cols, offset=e.offset + 4 * cols)
    q = np.frombuffer(buf, dtype=np.int8, count=rows * cols, offset=e.offset + 8 * cols)
    return QuantizedMatrix(
        rows=rows, cols=cols, q=q.reshape(rows, cols), col_scale=scale, col_zeropoint=zp
    )


def load(path, precision: str = PRECISION_F32) -> tuple[ModelConfig, Weights, Vocabulary]:
    """Load a model file at the requested runtime precision.

    An f32 file loaded at int8 precision is quantized and packed here, once;
    an int8 file loaded at f32 precision is dequantized (useful for
    debugging, documented as lossy).
    """
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}")
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise OSError(f"cannot read model from {path}: {exc}") from exc
    cfg, vocab, entries, _ = _read_header(buf, path)
    _validate_entries(cfg, entries, len(buf), path)
    by_name = {e.name: e for e in entries}
    if cfg.shared_embeddings:
        for alias in ("tgt_embed", "out_proj"):
            e, src = by_name[alias], by_name["src_embed"]
            if (e.offset, e.nbytes) != (src.offset, src.nbytes):
                raise ModelFormatError(
                    f"{path}: {alias} must alias src_embed in a shared-embeddings model"
                )
    arrays = {e.name: _entry_array(buf, e) for e in entries}
    if not isinstance(arrays["src_embed"], np.ndarray):
        raise ModelFormatError(f"{path}: embeddings must be stored as f32")
    weights = assemble_weights(cfg, arrays, precision)
    return cfg, weights, vocab


def describe(path) -> str:
    """Human-readable dump of a model file's directory."""
    with open(path, "rb") as f:
        buf = f.read()
    cfg, vocab, entries, _ = _read_header(buf, path)
    lines = [
        f"version={VERSION} file_bytes={len(buf)}",
        (
            f"config: enc_layers={cfg.n_enc_layers} dec_layers={cfg.n_dec_layers}"
            f" d_model={cfg.d_model} heads={cfg.n_heads_enc}/{cfg.n_heads_dec}"
            f" ffn={cfg.ffn_dim_enc}/{cfg.ffn_dim_dec} vocab={cfg.vocab_size}"
            f" max_positions={cfg.max_positions} norm={cfg.norm_variant}"
            f" shared_embeddings={cfg.shared_embeddings}"
        ),
        f"vocabulary: {len(vocab)} tokens",
        f"tensors: {len(entries)}",
    ]
    for e in entries:
        dtype = "f32" if e.dtype == DTYPE_F32 else "qint8"
        shape = "x".join(str(s) for s in e.shape)
        lines.append(f"  {e.name}  dtype={dtype} shape={shape} offset={e.offset} bytes={e.nbytes}")
    return "\n".join(lines)


# --- random models -----------------------------------------------------------


def random_model(cfg: ModelConfig, seed: int) -> Weights:
    """Deterministic pseudo-random weights for testing and benchmarks.

    Matrices are scaled by 1/sqrt(d_model) so forward passes stay tame;
    the same seed always reproduces the same bits.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(cfg.d_model)

    def mat(*shape):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    def small(*shape):
        return (rng.standard_normal(shape) * 0.01).astype(np.float32)

    arrays: dict[str, object] = {}
    arrays["src_embed"] = mat(cfg.vocab_size, cfg.d_model)
    arrays["tgt_embed"] = (
        arrays["src_embed"] if cfg.shared_embeddings else mat(cfg.vocab_size, cfg.d_model)
    )
    arrays["out_proj"] = (
        arrays["src_embed"] if cfg.shared_embeddings else mat(cfg.vocab_size, cfg.d_model)
    )
    arrays["out_bias"] = small(cfg.vocab_size)
    for name, kind, shape in tensor_manifest(cfg):
        if name in arrays:
            continue
        if kind == "gemm":
            arrays[name] = mat(*shape)
        elif name.endswith(".gain"):
            arrays[name] = (1.0 + 0.01 * rng.standard_normal(shape[0])).astype(np.float32)
        else:
            arrays[name] = small(*shape)
    return assemble_weights(cfg, arrays, PRECISION_F32)


def synthetic_vocabulary(size: int) -> Vocabulary:
    """Vocabulary of printable single characters plus filler tokens."""
    if size < len(SPECIAL_TOKENS):
        raise ValueError(f"vocab size must be at least {len(SPECIAL_TOKENS)}")
    vocab = Vocabulary()
    chars = [chr(c) for c in range(33, 127)]
    for ch in chars:
        if len(vocab) >= size:
            break
        vocab.add(ch)
    i = 0
    while len(vocab) < size:
        vocab.add(f"tok{i}")
        i += 1
    return vocab
