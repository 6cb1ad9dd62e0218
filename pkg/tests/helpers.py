"""Shared test scaffolding: tiny models, corpora, codecs, and the
non-incremental decoder oracle."""

from collections import Counter

import numpy as np

from fastnmt.model import (
    EncoderOutput,
    ModelConfig,
    TranslationModel,
    attention,
)
from fastnmt import model as model_mod
from fastnmt.store import assemble_weights, random_model, tensor_manifest
from fastnmt.textpipe import BpeCodec, Vocabulary

WORDS = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "river",
    "stone", "light", "deep", "water", "under", "bridge", "night", "train",
    "paper", "glass", "winter", "morning", "garden", "little", "house",
    "green", "simple", "letter", "answer", "question", "window",
]


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        n_enc_layers=2,
        n_dec_layers=1,
        d_model=16,
        n_heads_enc=2,
        n_heads_dec=1,
        ffn_dim_enc=32,
        ffn_dim_dec=16,
        vocab_size=48,
        max_positions=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides) -> TranslationModel:
    cfg = tiny_config(**overrides)
    return TranslationModel(cfg, random_model(cfg, seed))


def sample_student_config(rng: np.random.Generator, vocab_size=48) -> ModelConfig:
    """Student-family shapes (deep encoder, shallow decoder) scaled down."""
    d = int(rng.choice([32, 64]))
    return ModelConfig(
        n_enc_layers=int(rng.choice([3, 6, 12])),
        n_dec_layers=int(rng.choice([1, 1, 1, 6])),  # mostly one decoder layer
        d_model=d,
        n_heads_enc=int(rng.choice([1, 2, 4])),
        n_heads_dec=int(rng.choice([1, 2])),
        ffn_dim_enc=2 * d,
        ffn_dim_dec=int(rng.choice([0, d])),
        vocab_size=vocab_size,
        max_positions=64,
        norm_variant=str(rng.choice(["l2", "l1"])),
        shared_embeddings=bool(rng.integers(0, 2)),
    )


def zero_weights(cfg: ModelConfig):
    """All-zero parameters except unit norm gains."""
    arrays = {}
    for name, kind, shape in tensor_manifest(cfg):
        if name.endswith(".gain"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float32)
    return assemble_weights(cfg, arrays, "f32")


def make_batch(rows, pad_id=0):
    """Pad a list of id lists into (tokens, pad_mask) arrays."""
    n = len(rows)
    width = max(len(r) for r in rows)
    tokens = np.full((n, width), pad_id, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
        mask[i, : len(r)] = True
    return tokens, mask


def random_rows(rng, batch, lo=3, hi=7, vocab=48):
    """Random sentences of real (non-special) token ids."""
    return [
        [int(t) for t in rng.integers(4, vocab, size=rng.integers(lo, hi + 1))]
        for _ in range(batch)
    ]


def full_prefix_logits(model: TranslationModel, enc: EncoderOutput, prefix: np.ndarray):
    """Non-incremental decoder forward over the whole prefix.

    Recomputes every position with a causal mask and fresh cross K/V; the
    oracle for the incremental DecodeCache path.  Returns the last
    position's logits [batch, vocab].
    """
    cfg, w = model.cfg, model.weights
    b, t = prefix.shape
    d = cfg.d_model

    def project(proj, x):
        bb, ll, _ = x.shape
        return proj.apply(x.reshape(bb * ll, -1)).reshape(bb, ll, -1)

    x = w.tgt_embed[prefix] * np.float32(np.sqrt(d)) + w.positions[:t]
    causal = np.where(
        np.tril(np.ones((t, t), dtype=bool)), np.float32(0), np.float32(-1e9)
    )[None, :, :]
    enc_mask = np.where(enc.pad_mask[:, None, :], np.float32(0), np.float32(-1e9))
    for layer in w.dec_layers:
        q = project(layer.self_attn.q, x)
        k = project(layer.self_attn.k, x)
        v = project(layer.self_attn.v, x)
        a = attention(q, k, v, causal, cfg.n_heads_dec)
        x = model_mod._norm(cfg, layer.norm1, x + project(layer.self_attn.o, a))
        qc = project(layer.cross_attn.q, x)
        kc = project(layer.cross_attn.k, enc.states)
        vc = project(layer.cross_attn.v, enc.states)
        a = attention(qc, kc, vc, enc_mask, cfg.n_heads_dec)
        x = model_mod._norm(cfg, layer.norm2, x + project(layer.cross_attn.o, a))
        if layer.ffn is not None:
            h = layer.ffn.w2.apply(
                np.maximum(layer.ffn.w1.apply(x.reshape(b * t, -1)), np.float32(0))
            )
            x = model_mod._norm(cfg, layer.norm3, x + h.reshape(b, t, -1))
    return w.out_proj.apply(x[:, -1, :])


def learn_bpe(words, n_merges) -> BpeCodec:
    """Minimal BPE learner over a word list (deterministic)."""
    seqs = [list(w) for w in words]
    merges = []
    for _ in range(n_merges):
        counts = Counter()
        for seq in seqs:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        for i, seq in enumerate(seqs):
            out, j = [], 0
            while j < len(seq):
                if j + 1 < len(seq) and (seq[j], seq[j + 1]) == best:
                    out.append(seq[j] + seq[j + 1])
                    j += 2
                else:
                    out.append(seq[j])
                    j += 1
            seqs[i] = out
    return BpeCodec(merges=merges)


def make_text_assets(n_merges=40):
    """(codec, vocab) covering WORDS: single chars plus merge outputs."""
    codec = learn_bpe(WORDS, n_merges)
    symbols = sorted({ch for w in WORDS for ch in w} | {",", ".", "!", "?"})
    vocab = Vocabulary(symbols + codec.merge_outputs())
    return codec, vocab


def synth_corpus(rng, n_lines, max_words=8) -> list[str]:
    """Plain sentences over WORDS with light punctuation."""
    lines = []
    for _ in range(n_lines):
        k = int(rng.integers(1, max_words + 1))
        words = [WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=k)]
        line = " ".join(words)
        if rng.random() < 0.3:
            line += "."
        lines.append(line)
    return lines
