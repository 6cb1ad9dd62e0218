"""Greedy and beam sequence generation.

Greedy search picks the argmax over raw logits each step -- the output
log-softmax is elided because it is strictly monotone and cannot change the
argmax.  Beam search (kept as a reference strategy and test oracle) scores
hypotheses by accumulated log-softmax with no length normalization.  Both
break score ties toward the lowest token id, which makes beam size 1
reproduce greedy token-for-token and keeps runs reproducible.

Rows that emit EOS (or exhaust their per-sentence output budget) are frozen:
they are fed PAD, their later outputs are ignored, and they cannot perturb
other rows.  Output sequences carry neither BOS nor EOS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .tensor import rowsum

__all__ = ["SearchConfig", "Hypothesis", "max_out_length", "greedy_translate", "beam_translate"]


@dataclass(frozen=True)
class SearchConfig:
    bos_id: int
    eos_id: int
    pad_id: int
    beam_size: int = 1
    max_len_ratio: float = 1.5
    max_len_offset: int = 5

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool


def max_out_length(src_len: int, cfg: SearchConfig, max_positions: int) -> int:
    """Output budget: min(max_positions, ceil(ratio * src_len) + offset)."""
    return max(1, min(max_positions, math.ceil(cfg.max_len_ratio * src_len) + cfg.max_len_offset))


def _src_lengths(enc) -> np.ndarray:
    return np.asarray(enc.pad_mask, dtype=bool).sum(axis=1)


def greedy_translate(model, enc, cfg: SearchConfig) -> list[list[int]]:
    """Greedy decode of a batch; returns one token-id list per row."""
    src_lens = _src_lengths(enc)
    batch = len(src_lens)
    if batch == 0:
        return []
    budgets = [max_out_length(int(n), cfg, model.max_positions) for n in src_lens]
    cache = model.init_cache(enc)
    prev = np.full(batch, cfg.bos_id, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(batch)]
    for t in range(max(budgets)):
        logits = model.step(cache, prev)
        nxt = np.argmax(logits, axis=1)  # first max = lowest token id
        prev = np.full(batch, cfg.pad_id, dtype=np.int64)
        for b in range(batch):
            if finished[b]:
                continue
            tok = int(nxt[b])
            if tok == cfg.eos_id:
                finished[b] = True
                continue
            outs[b].append(tok)
            prev[b] = tok
            if t + 1 >= budgets[b]:
                finished[b] = True
        if finished.all():
            break
    return outs


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(rowsum(np.exp(shifted)))[..., None]


def _slice_enc(enc, row: int):
    states = getattr(enc, "states", None)
    if states is None:  # minimal duck-typed encoder output (tests, toys)
        return SimpleNamespace(pad_mask=enc.pad_mask[row : row + 1])
    from .model import EncoderOutput

    return EncoderOutput(
        states=states[row : row + 1], pad_mask=enc.pad_mask[row : row + 1]
    )


def beam_translate(model, enc, cfg: SearchConfig) -> list[list[int]]:
    """Length-unnormalized beam search; returns one token-id list per row.

    Returns the best finished hypothesis, or the best unfinished one if
    nothing finished within the output budget.
    """
    return [_beam_one(model, _slice_enc(enc, b), cfg) for b in range(len(enc.pad_mask))]


def _beam_one(model, enc_row, cfg: SearchConfig) -> list[int]:
    k = cfg.beam_size
    budget = max_out_length(int(_src_lengths(enc_row)[0]), cfg, model.max_positions)
    cache = model.init_cache(enc_row)
    actives = [Hypothesis(tokens=(), score=0.0, finished=False)]
    done: list[Hypothesis] = []
    for _ in range(budget):
        prev = np.array(
            [h.tokens[-1] if h.tokens else cfg.bos_id for h in actives], dtype=np.int64
        )
        logits = model.step(cache, prev)
        logprobs = _log_softmax(logits.astype(np.float64))
        candidates = []
        for a, hyp in enumerate(actives):
            for v, lp in enumerate(logprobs[a]):
                candidates.append((hyp.score + float(lp), v, a))
        # Highest score first; ties -> lowest token id, then lowest parent.
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_actives: list[Hypothesis] = []
        parents: list[int] = []
        for score, v, a in candidates[:k]:
            if v == cfg.eos_id:
                done.append(Hypothesis(actives[a].tokens, score, True))
            else:
                next_actives.append(Hypothesis(actives[a].tokens + (v,), score, False))
                parents.append(a)
        if not next_actives or len(done) >= k:
            actives = next_actives
            break
        cache = cache.select(parents)
        actives = next_actives
    pool = done if done else actives
    best = max(pool, key=lambda h: (h.score, tuple(-t for t in h.tokens)))
    return list(best.tokens)
