"""Length-descending batch planning under sentence/token caps.

Sentences are sorted longest-first, then greedily packed into batches so
that each batch holds at most ``sbatch`` sentences and at most ``wbatch``
padded tokens (sentence count times the batch's longest length -- padded
accounting is what actually bounds memory, and descending order keeps the
padding waste small).  The plan records the permutation needed to put
batch outputs back into input order, and can bound the peak decode memory
before any tensor is allocated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import ModelConfig

__all__ = [
    "DecodeLimits",
    "Batch",
    "BatchPlan",
    "sort_by_length_desc",
    "form_batches",
    "plan_batches",
    "restore_order",
    "estimate_peak_memory",
]


class IntegrityError(ValueError):
    """Outputs do not line up with the batch plan."""


@dataclass(frozen=True)
class DecodeLimits:
    sbatch: int = 128  # max sentences per batch
    wbatch: int = 2048  # max padded tokens per batch

    def __post_init__(self):
        if self.sbatch < 1 or self.wbatch < 1:
            raise ValueError("sbatch and wbatch must be >= 1")


@dataclass(frozen=True)
class Batch:
    indices: tuple[int, ...]  # sentence indices, lengths non-increasing
    max_len: int  # padded length of this batch
    oversize: bool = False  # single sentence longer than wbatch

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (len(self.indices), self.max_len)


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...]
    # Original sentence index for each position of the concatenated batch
    # outputs; restore_order inverts it.
    permutation: tuple[int, ...]

    @property
    def n_items(self) -> int:
        return len(self.permutation)


def sort_by_length_desc(lengths) -> list[int]:
    """Indices sorted by descending length; ties keep input order."""
    return sorted(range(len(lengths)), key=lambda i: -lengths[i])


def form_batches(sorted_lengths, limits: DecodeLimits) -> list[Batch]:
    """Greedy maximal batches over already-sorted (descending) lengths.

    A sentence joins the current batch iff both caps still hold with it
    included; the batch's padded length is its first (longest) sentence.
    A single sentence longer than wbatch becomes its own batch flagged
    oversize -- the caller decides whether to split it.
    """
    lengths = list(sorted_lengths)
    if any(lengths[i] < lengths[i + 1] for i in range(len(lengths) - 1)):
        raise ValueError("lengths must be sorted in descending order")
    batches: list[Batch] = []
    cur: list[int] = []
    cur_max = 0
    for pos, length in enumerate(lengths):
        if not cur:
            cur, cur_max = [pos], length
        elif len(cur) + 1 <= limits.sbatch and (len(cur) + 1) * cur_max <= limits.wbatch:
            cur.append(pos)
        else:
            batches.append(Batch(tuple(cur), cur_max, oversize=cur_max > limits.wbatch))
            cur, cur_max = [pos], length
    if cur:
        batches.append(Batch(tuple(cur), cur_max, oversize=cur_max > limits.wbatch))
    return batches


def plan_batches(lengths, limits: DecodeLimits) -> BatchPlan:
    """Sort, batch, and record the order-restoring permutation."""
    order = sort_by_length_desc(lengths)
    sorted_lengths = [lengths[i] for i in order]
    groups = form_batches(sorted_lengths, limits)
    batches = tuple(
        Batch(tuple(order[p] for p in g.indices), g.max_len, g.oversize) for g in groups
    )
    permutation = tuple(i for b in batches for i in b.indices)
    return BatchPlan(batches=batches, permutation=permutation)


def restore_order(outputs, plan: BatchPlan) -> list:
    """Reorder concatenated batch outputs back to original input order."""
    outputs = list(outputs)
    if len(outputs) != plan.n_items:
        raise IntegrityError(
            f"got {len(outputs)} outputs for a plan of {plan.n_items} sentences"
        )
    restored = [None] * plan.n_items
    for out, original_index in zip(outputs, plan.permutation):
        restored[original_index] = out
    return restored


# --- peak-memory estimation -------------------------------------------------

# Fixed headroom for interpreter noise and small per-batch temporaries.
BASE_OVERHEAD_BYTES = 8 << 20
# Multiplier over the accounted live set, covering transient buffers.
SLACK_FACTOR = 1.5
_F32 = 4


def estimate_peak_memory(plan: BatchPlan, cfg: ModelConfig, max_out_len: int) -> int:
    """Upper bound in bytes on decode-time allocations for this plan.

    Accounts, at the worst-case batch dimensions, for the embedded inputs,
    the encoder activation live set across layers (plus attention score and
    FFN temporaries, which dominate for long rows), the decoder self/cross
    caches out to ``max_out_len`` steps, and the logits buffer; the total is
    inflated by SLACK_FACTOR on top of BASE_OVERHEAD_BYTES.  Monotone in
    every plan dimension.  Model weights are not included -- they are loaded
    before decoding starts.
    """
    if not plan.batches:
        return BASE_OVERHEAD_BYTES
    n_max = max(len(b.indices) for b in plan.batches)
    nl_max = max(len(b.indices) * b.max_len for b in plan.batches)
    nll_max = max(len(b.indices) * b.max_len * b.max_len for b in plan.batches)
    ncache_max = max(len(b.indices) * (b.max_len + max_out_len) for b in plan.batches)

    d = cfg.d_model
    heads = max(cfg.n_heads_enc, cfg.n_heads_dec)
    ffn = max(cfg.ffn_dim_enc, cfg.ffn_dim_dec, d)

    embed_in = nl_max * d
    # Residual stream per layer plus q/k/v/attn-out temporaries.
    enc_acts = nl_max * d * (cfg.n_enc_layers + 4)
    # Score matrix, its exp, and the normalized weights coexist briefly.
    enc_scores = nll_max * heads * 3
    ffn_tmp = nl_max * ffn * 2
    dec_caches = ncache_max * d * cfg.n_dec_layers * 2
    logits = n_max * cfg.vocab_size * 2
    live = (embed_in + enc_acts + enc_scores + ffn_tmp + dec_caches + logits) * _F32
    return BASE_OVERHEAD_BYTES + math.ceil(SLACK_FACTOR * live)
