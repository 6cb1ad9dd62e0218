"""Tokenization, BPE, vocabulary, and the order-preserving parallel driver.

The tokenizer is a deliberately small rule set (whitespace split, edge
punctuation detachment, a short protected-abbreviation list); anything
already tokenized can bypass it via the engine's pretokenized flag.  It is
total: any string in, tokens out, never an exception.

BPE follows the usual codes-file semantics: merges are ranked by file
order, the best-ranked applicable pair is merged repeatedly, and every
piece except the last carries the "@@" continuation suffix.  Merge matching
is positional over plain symbols (no marker symbol takes part in matching);
"</w>" suffixes in codes files from other toolkits are tolerated and
stripped at load.

``run_parallel`` fans fixed-size line chunks out to a thread pool and emits
results strictly in input order, so output is byte-identical to a
sequential run for any worker count.
"""

from __future__ import annotations

import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

__all__ = [
    "PAD_ID",
    "UNK_ID",
    "BOS_ID",
    "EOS_ID",
    "SPECIAL_TOKENS",
    "Vocabulary",
    "BpeCodec",
    "ChunkPlan",
    "ChunkFailure",
    "tokenize",
    "detokenize",
    "bpe_encode",
    "bpe_decode",
    "run_parallel",
]

PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

BPE_SEPARATOR = "@@"

# Kept whole by the tokenizer even though they end in a period.
PROTECTED_TOKENS = frozenset(
    ["mr.", "mrs.", "ms.", "dr.", "prof.", "etc.", "e.g.", "i.e.", "vs.", "no.", "st."]
)


class Vocabulary:
    """Token <-> id map with the four specials pinned at ids 0..3."""

    def __init__(self, tokens=()):
        self._tokens: list[str] = list(SPECIAL_TOKENS)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx] if 0 <= idx < len(self._tokens) else UNK_TOKEN

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.token_of(i) for i in ids]

    def all_tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, t in enumerate(self._tokens):
                f.write(f"{t} {i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                token, _, idx = line.rpartition(" ")
                entries.append((int(idx), token))
        entries.sort()
        vocab = cls()
        for idx, token in entries:
            if token in SPECIAL_TOKENS:
                continue
            got = vocab.add(token)
            if got != idx:
                raise ValueError(f"non-contiguous vocab id {idx} for {token!r}")
        return vocab


# --- tokenizer ---------------------------------------------------------------


def _is_separable(ch: str) -> bool:
    return unicodedata.category(ch)[0] in ("P", "S")


def tokenize(line: str) -> list[str]:
    """Whitespace split with edge punctuation/symbol detachment.

    Internal separators survive ("3.14", "don't", "well-known"), a small
    list of abbreviations keeps its trailing period, and runs of pure
    punctuation split into single characters.  Control characters are
    treated as whitespace.  Idempotent on its own (re-joined) output.
    """
    cleaned = "".join(
        " " if unicodedata.category(ch)[0] == "C" else ch for ch in line
    )
    out: list[str] = []
    for raw in cleaned.split():
        if raw.lower() in PROTECTED_TOKENS:
            out.append(raw)
            continue
        i, j = 0, len(raw)
        lead = []
        while i < j and _is_separable(raw[i]):
            lead.append(raw[i])
            i += 1
        trail = []
        while j > i and _is_separable(raw[j - 1]) and raw[i:j].lower() not in PROTECTED_TOKENS:
            trail.append(raw[j - 1])
            j -= 1
        out.extend(lead)
        if i < j:
            out.append(raw[i:j])
        out.extend(reversed(trail))
    return out


_NO_SPACE_BEFORE = set(",.!?;:%)]}»”’…")
_NO_SPACE_AFTER = set("([{«“‘$€£¥#")


def detokenize(tokens) -> str:
    """Join tokens, reattaching edge punctuation per the tokenizer's rules."""
    out = ""
    prev = None
    for tok in tokens:
        if prev is None:
            out = tok
        elif (len(tok) == 1 and tok in _NO_SPACE_BEFORE) or (
            len(prev) == 1 and prev in _NO_SPACE_AFTER
        ):
            out += tok
        else:
            out += " " + tok
        prev = tok
    return out


# --- BPE ---------------------------------------------------------------------


@dataclass
class BpeCodec:
    """Merge table with file-order priorities and the "@@" separator."""

    merges: list[tuple[str, str]]
    separator: str = BPE_SEPARATOR
    _rank: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        self._rank = {}
        for pair in self.merges:
            if pair not in self._rank:
                self._rank[pair] = len(self._rank)

    def segment(self, word: str) -> list[str]:
        """Split one token into BPE pieces (no separators attached)."""
        if len(word) < 2:
            return [word]
        syms = list(word)
        while len(syms) > 1:
            best_rank, best_pair = None, None
            for a, b in zip(syms, syms[1:]):
                r = self._rank.get((a, b))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_pair = r, (a, b)
            if best_pair is None:
                break
            merged: list[str] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best_pair:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        return syms

    def merge_outputs(self) -> list[str]:
        return [a + b for a, b in self.merges]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("#version: 0.2\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path) -> "BpeCodec":
        """Read a codes file: one merge per line, two space-separated symbols.

        A leading "#version" header is tolerated, as are "</w>" end-of-word
        suffixes (stripped; the first occurrence of a pair keeps its rank).
        """
        merges: list[tuple[str, str]] = []
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if n == 0 and line.startswith("#version"):
                    continue
                parts = line.split()
                if len(parts) < 2:
                    continue
                a = parts[0].replace("</w>", "")
                b = parts[1].replace("</w>", "")
                if a and b:
                    merges.append((a, b))
        return cls(merges=merges)


def bpe_encode(tokens, codec: BpeCodec) -> list[str]:
    """Apply BPE to each token; non-final pieces get the "@@" suffix."""
    out: list[str] = []
    for tok in tokens:
        pieces = codec.segment(tok)
        out.extend(p + codec.separator for p in pieces[:-1])
        out.append(pieces[-1])
    return out


def bpe_decode(subwords) -> list[str]:
    """Rejoin "@@"-suffixed pieces; a dangling final separator stays literal."""
    out: list[str] = []
    buf: str | None = None
    pieces = list(subwords)
    for i, piece in enumerate(pieces):
        continues = piece.endswith(BPE_SEPARATOR) and i + 1 < len(pieces)
        core = piece[: -len(BPE_SEPARATOR)] if continues else piece
        buf = core if buf is None else buf + core
        if not continues:
            out.append(buf)
            buf = None
    return out


# --- chunked parallel execution ----------------------------------------------


class ChunkFailure(RuntimeError):
    """A worker failed while processing one chunk."""

    def __init__(self, chunk_index: int, cause: BaseException):
        super().__init__(f"chunk {chunk_index} failed: {cause}")
        self.chunk_index = chunk_index


@dataclass(frozen=True)
class ChunkPlan:
    """Fixed-size split of an input line range across a worker pool."""

    chunk_size: int
    worker_count: int
    boundaries: tuple[tuple[int, int], ...]

    @classmethod
    def for_lines(cls, n_lines: int, chunk_size: int = 2000, worker_count: int = 1) -> "ChunkPlan":
        if chunk_size < 1 or worker_count < 1:
            raise ValueError("chunk_size and worker_count must be >= 1")
        bounds = tuple(
            (s, min(s + chunk_size, n_lines)) for s in range(0, n_lines, chunk_size)
        )
        return cls(chunk_size=chunk_size, worker_count=worker_count, boundaries=bounds)


def run_parallel(lines, plan: ChunkPlan, stage_fn) -> list:
    """Apply ``stage_fn`` to each chunk of ``lines``, outputs in input order.

    ``stage_fn`` takes a list of lines and returns a list of equal length.
    Results are concatenated in chunk order regardless of completion order,
    so any worker count reproduces the sequential output exactly.  A worker
    failure aborts the run with the failing chunk index.
    """
    lines = list(lines)

    def guarded(idx: int, chunk: list) -> list:
        try:
            result = list(stage_fn(chunk))
        except Exception as exc:  # noqa: BLE001 - rewrapped with chunk context
            raise ChunkFailure(idx, exc) from exc
        if len(result) != len(chunk):
            raise ChunkFailure(
                idx, ValueError(f"stage returned {len(result)} lines for {len(chunk)}")
            )
        return result

    if plan.worker_count == 1:
        out: list = []
        for idx, (s, e) in enumerate(plan.boundaries):
            out.extend(guarded(idx, lines[s:e]))
        return out

    out = []
    with ThreadPoolExecutor(max_workers=plan.worker_count) as pool:
        futures = [
            pool.submit(guarded, idx, lines[s:e])
            for idx, (s, e) in enumerate(plan.boundaries)
        ]
        for fut in futures:
            out.extend(fut.result())
    return out
