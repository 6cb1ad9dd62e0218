"""Configurable transformer encoder-decoder forward pass.

The architecture family is deep-encoder/shallow-decoder: N encoder layers,
M decoder layers (typically one), independent head counts for encoder and
decoder (a single decoder head skips the head split/merge entirely), and an
optional decoder FFN (``ffn_dim_dec = 0`` removes that sublayer including
its norm).  Residuals use the vanilla post-norm arrangement with sinusoidal
absolute positions, and the attention scaling divides the query by
sqrt(d_k) up front rather than scaling the score matrix -- an exact
reordering that saves a full [L x L] multiply.

Every weight matmul (attention projections, FFN, output projection) goes
through a :class:`Projection`, which runs either the float32 kernel or the
packed 8-bit GEMM depending on how the weights were loaded.  Embedding
lookup, softmax, and the norms always stay in float.

Incremental decoding keeps per-layer self-attention K/V histories and the
cross-attention K/V (projected from the encoder states exactly once) in a
:class:`DecodeCache`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor
from .quant8 import PackedMatrix, qgemm, quantize_activations
from .tensor import ShapeError

NORM_L2 = "l2"
NORM_L1 = "l1"

# Stable stand-in for -inf on attention logits; exp() underflows it to 0.
ATTN_MASK_VALUE = np.float32(-1e9)


class LengthError(ValueError):
    """Input exceeds the model's position budget."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one model."""

    n_enc_layers: int
    n_dec_layers: int
    d_model: int
    n_heads_enc: int
    n_heads_dec: int
    ffn_dim_enc: int
    ffn_dim_dec: int  # 0 removes the decoder FFN sublayer
    vocab_size: int
    max_positions: int
    norm_variant: str = NORM_L2
    shared_embeddings: bool = True

    def __post_init__(self):
        if min(self.n_enc_layers, self.n_dec_layers, self.d_model, self.n_heads_enc,
               self.n_heads_dec, self.ffn_dim_enc, self.vocab_size, self.max_positions) < 1:
            raise ValueError("all sizes except ffn_dim_dec must be >= 1")
        if self.ffn_dim_dec < 0:
            raise ValueError("ffn_dim_dec must be >= 0")
        if self.d_model % self.n_heads_enc or self.d_model % self.n_heads_dec:
            raise ValueError("d_model must be divisible by both head counts")
        if self.norm_variant not in (NORM_L2, NORM_L1):
            raise ValueError(f"unknown norm variant {self.norm_variant!r}")


@dataclass
class Projection:
    """One GEMM weight plus bias, in float32 or packed-int8 form."""

    weight: Union[np.ndarray, PackedMatrix]  # [k, n] float32, or packed equivalent
    bias: np.ndarray  # float32 [n]

    @property
    def quantized(self) -> bool:
        return isinstance(self.weight, PackedMatrix)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """x [m, k] -> x @ W + bias, through the precision-specific kernel."""
        if self.quantized:
            out = qgemm(quantize_activations(x), self.weight)
        else:
            out = tensor.matmul(x, self.weight)
        return out + self.bias


@dataclass
class NormParams:
    gain: np.ndarray  # float32 [d]
    bias: np.ndarray  # float32 [d]


@dataclass
class AttentionBlock:
    q: Projection
    k: Projection
    v: Projection
    o: Projection


@dataclass
class FeedForward:
    w1: Projection  # [d, ffn]
    w2: Projection  # [ffn, d]


@dataclass
class EncoderLayer:
    attn: AttentionBlock
    norm1: NormParams
    ffn: FeedForward
    norm2: NormParams


@dataclass
class DecoderLayer:
    self_attn: AttentionBlock
    norm1: NormParams
    cross_attn: AttentionBlock
    norm2: NormParams
    ffn: Optional[FeedForward] = None  # absent when ffn_dim_dec == 0
    norm3: Optional[NormParams] = None


@dataclass
class Weights:
    """All model parameters.

    With shared embeddings, ``tgt_embed`` is the same storage as
    ``src_embed`` and the output projection weight is its transposed view.
    ``positions`` is the derived sinusoidal table, not a parameter.
    """

    src_embed: np.ndarray  # float32 [vocab, d]
    tgt_embed: np.ndarray  # float32 [vocab, d]
    out_proj: Projection  # weight [d, vocab]
    enc_layers: list[EncoderLayer]
    dec_layers: list[DecoderLayer]
    positions: np.ndarray  # float32 [max_positions, d]


@dataclass(frozen=True)
class EncoderOutput:
    states: np.ndarray  # float32 [batch, src_len, d]
    pad_mask: np.ndarray  # bool [batch, src_len], True where a real token sits


@dataclass
class DecodeCache:
    """Per-batch incremental decoder state.

    ``self_k``/``self_v`` grow by one position per decode step; ``cross_k``/
    ``cross_v`` are projected from the encoder states exactly once.
    """

    self_k: list[np.ndarray]  # per layer [batch, steps, d]
    self_v: list[np.ndarray]
    cross_k: list[np.ndarray]  # per layer [batch, src_len, d]
    cross_v: list[np.ndarray]
    enc_mask: np.ndarray  # float32 [batch, 1, src_len] additive
    batch: int
    step: int = 0

    def select(self, rows: list[int]) -> "DecodeCache":
        """New cache holding the given rows (with repetition), for beam search."""
        idx = np.asarray(rows, dtype=np.intp)
        return DecodeCache(
            self_k=[k[idx] for k in self.self_k],
            self_v=[v[idx] for v in self.self_v],
            cross_k=[k[idx] for k in self.cross_k],
            cross_v=[v[idx] for v in self.cross_v],
            enc_mask=self.enc_mask[idx],
            batch=len(rows),
            step=self.step,
        )


def sinusoid_positions(max_positions: int, d_model: int) -> np.ndarray:
    """Standard sin/cos absolute position table [max_positions, d_model]."""
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(idx / 2.0)) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def _norm(cfg: ModelConfig, params: NormParams, x: np.ndarray) -> np.ndarray:
    if cfg.norm_variant == NORM_L1:
        return tensor.layer_norm_l1(x, params.gain, params.bias)
    return tensor.layer_norm_l2(x, params.gain, params.bias)


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: Optional[np.ndarray],
    n_heads: int,
) -> np.ndarray:
    """Scaled dot-product attention over [batch, len, d] inputs.

    The query is divided by sqrt(d_k) before the score product (exact
    reorder of the usual score scaling).  ``mask`` is additive, broadcastable
    to [batch, q_len, k_len]; masked positions get ATTN_MASK_VALUE and end up
    with exactly zero weight.  With one head, the head split/merge is skipped
    entirely.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects [batch, len, d] operands")
    b, lq, d = q.shape
    if k.shape != v.shape or k.shape[0] != b or k.shape[2] != d:
        raise ShapeError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    if d % n_heads:
        raise ShapeError(f"d={d} not divisible by {n_heads} heads")
    lk = k.shape[1]
    dk = d // n_heads
    qs = q * np.float32(1.0 / math.sqrt(dk))

    if n_heads == 1:
        scores = np.einsum("bqd,bkd->bqk", qs, k)
        if mask is not None:
            scores = scores + mask
        w = tensor.softmax(scores, axis=-1)
        return np.einsum("bqk,bkd->bqd", w, v)

    qh = qs.reshape(b, lq, n_heads, dk)
    kh = k.reshape(b, lk, n_heads, dk)
    vh = v.reshape(b, lk, n_heads, dk)
    scores = np.einsum("bqhd,bkhd->bhqk", qh, kh)
    if mask is not None:
        scores = scores + mask[:, None, :, :]
    w = tensor.softmax(scores, axis=-1)
    out = np.einsum("bhqk,bkhd->bqhd", w, vh)
    return np.ascontiguousarray(out).reshape(b, lq, d)


def _additive_mask(pad_mask: np.ndarray) -> np.ndarray:
    """bool [batch, len] -> additive float32 [batch, 1, len]."""
    return np.where(pad_mask[:, None, :], np.float32(0), ATTN_MASK_VALUE)


def _project3(proj: Projection, x: np.ndarray) -> np.ndarray:
    b, l, _ = x.shape
    out = proj.apply(x.reshape(b * l, -1))
    return out.reshape(b, l, -1)


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    return tokens


def encode(
    cfg: ModelConfig,
    weights: Weights,
    tokens: np.ndarray,
    pad_mask: np.ndarray,
) -> EncoderOutput:
    """Run the encoder stack over a padded batch of token ids.

    ``pad_mask`` is True where a real token sits.  Pad positions are masked
    out of every attention, so right-padding never leaks into real outputs.
    """
    tokens = _check_tokens(cfg, tokens)
    b, s = tokens.shape
    if s > cfg.max_positions:
        raise LengthError(f"source length {s} exceeds max_positions {cfg.max_positions}")
    x = weights.src_embed[tokens] * np.float32(math.sqrt(cfg.d_model))
    x = x + weights.positions[:s]
    mask = _additive_mask(pad_mask)
    for layer in weights.enc_layers:
        q = _project3(layer.attn.q, x)
        k = _project3(layer.attn.k, x)
        v = _project3(layer.attn.v, x)
        a = attention(q, k, v, mask, cfg.n_heads_enc)
        x = _norm(cfg, layer.norm1, x + _project3(layer.attn.o, a))
        h = layer.ffn.w2.apply(tensor.relu(layer.ffn.w1.apply(x.reshape(b * s, -1))))
        x = _norm(cfg, layer.norm2, x + h.reshape(b, s, -1))
    return EncoderOutput(states=x, pad_mask=np.asarray(pad_mask, dtype=bool))


def init_cross_cache(cfg: ModelConfig, weights: Weights, enc: EncoderOutput) -> DecodeCache:
    """Precompute per-layer cross-attention K/V; self histories start empty."""
    b, s, d = enc.states.shape
    cross_k, cross_v = [], []
    for layer in weights.dec_layers:
        cross_k.append(_project3(layer.cross_attn.k, enc.states))
        cross_v.append(_project3(layer.cross_attn.v, enc.states))
    empty = np.zeros((b, 0, d), dtype=np.float32)
    return DecodeCache(
        self_k=[empty.copy() for _ in weights.dec_layers],
        self_v=[empty.copy() for _ in weights.dec_layers],
        cross_k=cross_k,
        cross_v=cross_v,
        enc_mask=_additive_mask(enc.pad_mask),
        batch=b,
    )


def decode_step(
    cfg: ModelConfig,
    weights: Weights,
    cache: DecodeCache,
    prev_tokens: np.ndarray,
) -> np.ndarray:
    """One incremental decoder step; returns logits [batch, vocab].

    Embeds ``prev_tokens`` at the current position, appends this step's
    self-attention K/V to the cache, and projects the final states to
    vocabulary logits (raw, no softmax).
    """
    prev_tokens = _check_tokens(cfg, prev_tokens)
    if prev_tokens.shape != (cache.batch,):
        raise ShapeError(f"prev_tokens must be [batch={cache.batch}], got {prev_tokens.shape}")
    t = cache.step
    if t >= cfg.max_positions:
        raise LengthError(f"decode position {t} exceeds max_positions {cfg.max_positions}")
    b = cache.batch
    x = weights.tgt_embed[prev_tokens] * np.float32(math.sqrt(cfg.d_model))
    x = (x + weights.positions[t]).reshape(b, 1, -1)
    for i, layer in enumerate(weights.dec_layers):
        q = _project3(layer.self_attn.q, x)
        k = _project3(layer.self_attn.k, x)
        v = _project3(layer.self_attn.v, x)
        cache.self_k[i] = np.concatenate([cache.self_k[i], k], axis=1)
        cache.self_v[i] = np.concatenate([cache.self_v[i], v], axis=1)
        a = attention(q, cache.self_k[i], cache.self_v[i], None, cfg.n_heads_dec)
        x = _norm(cfg, layer.norm1, x + _project3(layer.self_attn.o, a))
        qc = _project3(layer.cross_attn.q, x)
        a = attention(qc, cache.cross_k[i], cache.cross_v[i], cache.enc_mask, cfg.n_heads_dec)
        x = _norm(cfg, layer.norm2, x + _project3(layer.cross_attn.o, a))
        if layer.ffn is not None:
            h = layer.ffn.w2.apply(tensor.relu(layer.ffn.w1.apply(x.reshape(b, -1))))
            x = _norm(cfg, layer.norm3, x + h.reshape(b, 1, -1))
    cache.step = t + 1
    return weights.out_proj.apply(x.reshape(b, -1))


def count_params(cfg: ModelConfig) -> int:
    """Exact parameter count: embeddings (once when shared), projections
    with biases, and norm gains/biases.  Position encodings are derived,
    not parameters."""
    d, v = cfg.d_model, cfg.vocab_size
    proj = d * d + d
    norm = 2 * d
    enc_layer = 4 * proj + norm + (d * cfg.ffn_dim_enc + cfg.ffn_dim_enc
                                   + cfg.ffn_dim_enc * d + d) + norm
    dec_layer = 8 * proj + 2 * norm
    if cfg.ffn_dim_dec > 0:
        dec_layer += (d * cfg.ffn_dim_dec + cfg.ffn_dim_dec
                      + cfg.ffn_dim_dec * d + d) + norm
    if cfg.shared_embeddings:
        embeddings = v * d  # one table serves source, target, and projection
    else:
        embeddings = 3 * v * d
    out_bias = v
    return (embeddings + out_bias
            + cfg.n_enc_layers * enc_layer
            + cfg.n_dec_layers * dec_layer)


@dataclass
class TranslationModel:
    """Config + weights bundled behind the decoding interface the search
    strategies expect (encode / init_cache / step)."""

    cfg: ModelConfig
    weights: Weights

    @property
    def max_positions(self) -> int:
        return self.cfg.max_positions

    def encode(self, tokens: np.ndarray, pad_mask: np.ndarray) -> EncoderOutput:
        return encode(self.cfg, self.weights, tokens, pad_mask)

    def init_cache(self, enc: EncoderOutput) -> DecodeCache:
        return init_cross_cache(self.cfg, self.weights, enc)

    def step(self, cache: DecodeCache, prev_tokens: np.ndarray) -> np.ndarray:
        return decode_step(self.cfg, self.weights, cache, prev_tokens)
