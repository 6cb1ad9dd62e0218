import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastnmt.textpipe import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    BpeCodec,
    ChunkFailure,
    ChunkPlan,
    Vocabulary,
    bpe_decode,
    bpe_encode,
    detokenize,
    run_parallel,
    tokenize,
)

from helpers import learn_bpe, WORDS


class TestTokenize:
    def test_punctuation_detachment(self):
        assert tokenize("Hello, world!") == ["Hello", ",", "world", "!"]

    def test_empty_line(self):
        assert tokenize("") == []
        assert tokenize("   \t  ") == []

    def test_numbers_and_currency(self):
        assert tokenize("3.14 costs $5") == ["3.14", "costs", "$", "5"]

    def test_protected_abbreviations(self):
        assert tokenize("see Dr. Smith etc.") == ["see", "Dr.", "Smith", "etc."]
        assert tokenize("etc.,") == ["etc.", ","]

    def test_internal_separators_survive(self):
        assert tokenize("don't stop well-known") == ["don't", "stop", "well-known"]

    def test_pure_punctuation_splits(self):
        assert tokenize("!!! --") == ["!", "!", "!", "-", "-"]

    def test_control_characters_are_whitespace(self):
        assert tokenize("a\x01b\x02 c") == ["a", "b", "c"]

    def test_brackets(self):
        assert tokenize("(hello)") == ["(", "hello", ")"]

    @given(st.text(max_size=60))
    @settings(max_examples=150, deadline=None)
    def test_total_and_idempotent(self, line):
        tokens = tokenize(line)
        assert all(isinstance(t, str) and t for t in tokens)
        assert tokenize(" ".join(tokens)) == tokens


class TestDetokenize:
    def test_inverse_of_example(self):
        assert detokenize(["Hello", ",", "world", "!"]) == "Hello, world!"

    def test_empty(self):
        assert detokenize([]) == ""

    def test_attach_rules(self):
        assert detokenize(["$", "5"]) == "$5"
        assert detokenize(["(", "a", ")"]) == "(a)"
        assert detokenize(["a", ";", "b"]) == "a; b"

    def test_canonical_roundtrip_fuzz(self):
        rng = np.random.default_rng(0)
        pieces = WORDS + ["7", "3.14", "x9"]
        for _ in range(1000):
            k = int(rng.integers(1, 9))
            toks = [pieces[int(i)] for i in rng.integers(0, len(pieces), size=k)]
            if rng.random() < 0.4:
                toks.insert(int(rng.integers(1, len(toks) + 1)), ",")
            if rng.random() < 0.5:
                toks.append(".")
            line = detokenize(toks)
            assert tokenize(line) == tokenize(detokenize(tokenize(line)))
            assert detokenize(tokenize(line)) == line


class TestVocabulary:
    def test_specials_pinned(self):
        v = Vocabulary(["alpha", "beta"])
        assert v.id_of("<pad>") == PAD_ID == 0
        assert v.id_of("<unk>") == UNK_ID == 1
        assert v.id_of("<bos>") == BOS_ID == 2
        assert v.id_of("<eos>") == EOS_ID == 3
        assert v.id_of("alpha") == 4

    def test_unknown_maps_to_unk(self):
        v = Vocabulary(["alpha"])
        assert v.encode(["alpha", "nope"]) == [4, UNK_ID]

    def test_save_load_roundtrip(self, tmp_path):
        v = Vocabulary(["alpha", "beta", "with space"])
        p = tmp_path / "vocab.txt"
        v.save(p)
        v2 = Vocabulary.load(p)
        assert v2.all_tokens() == v.all_tokens()


class TestBpe:
    def test_low_lower_example(self):
        codec = BpeCodec(merges=[("l", "o"), ("lo", "w")])
        assert bpe_encode(["low"], codec) == ["low"]
        assert bpe_encode(["lower"], codec) == ["low@@", "e@@", "r"]

    def test_full_form_in_closure_single_piece(self):
        codec = BpeCodec(merges=[("a", "b"), ("ab", "c"), ("abc", "d")])
        assert bpe_encode(["abcd"], codec) == ["abcd"]

    def test_priority_order_not_position(self):
        # (b, c) outranks (a, b): "abc" -> a + bc
        codec = BpeCodec(merges=[("b", "c"), ("a", "b")])
        assert codec.segment("abc") == ["a", "bc"]

    def test_decode_examples(self):
        assert bpe_decode(["low@@", "er"]) == ["lower"]
        assert bpe_decode(["hello"]) == ["hello"]
        assert bpe_decode(["a@@"]) == ["a@@"]

    def test_decode_multi_piece(self):
        assert bpe_decode(["un@@", "believ@@", "able", "!"]) == ["unbelievable", "!"]

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=80, deadline=None)
    def test_roundtrip_fuzzed_codecs(self, seed):
        rng = np.random.default_rng(seed)
        alphabet = list("abcdef")
        symbols = list(alphabet)
        merges = []
        for _ in range(int(rng.integers(0, 12))):
            a = symbols[int(rng.integers(0, len(symbols)))]
            b = symbols[int(rng.integers(0, len(symbols)))]
            merges.append((a, b))
            symbols.append(a + b)
        codec = BpeCodec(merges=merges)
        for _ in range(5):
            word = "".join(
                alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=rng.integers(1, 10))
            )
            assert bpe_decode(bpe_encode([word], codec)) == [word]

    def test_roundtrip_over_real_words(self):
        codec = learn_bpe(WORDS, 30)
        for w in WORDS:
            assert bpe_decode(bpe_encode([w], codec)) == [w]

    def test_codes_file_roundtrip(self, tmp_path):
        codec = learn_bpe(WORDS, 10)
        p = tmp_path / "codes.txt"
        codec.save(p)
        loaded = BpeCodec.load(p)
        assert loaded.merges == codec.merges

    def test_codes_file_tolerates_markers_and_header(self, tmp_path):
        p = tmp_path / "codes.txt"
        p.write_text("#version: 0.2\nl o\nlo w</w>\n\ne r</w> 42\n", encoding="utf-8")
        codec = BpeCodec.load(p)
        assert codec.merges == [("l", "o"), ("lo", "w"), ("e", "r")]

    def test_separator_in_dirty_token_roundtrips(self):
        codec = BpeCodec(merges=[("a", "@")])
        for word in ["a@@b", "x@@", "@@"]:
            assert bpe_decode(bpe_encode([word], codec)) == [word]


class TestRunParallel:
    def stage(self, chunk):
        return [line.upper() for line in chunk]

    def test_single_worker_matches_map(self):
        lines = [f"line {i}" for i in range(25)]
        plan = ChunkPlan.for_lines(len(lines), chunk_size=4, worker_count=1)
        assert run_parallel(lines, plan, self.stage) == [l.upper() for l in lines]

    @pytest.mark.parametrize("workers", [2, 5, 8])
    def test_parallel_equals_sequential(self, workers):
        lines = [f"line {i}" for i in range(101)]
        seq = run_parallel(lines, ChunkPlan.for_lines(101, 7, 1), self.stage)
        par = run_parallel(lines, ChunkPlan.for_lines(101, 7, workers), self.stage)
        assert par == seq

    def test_10000_lines_8_workers_chunk_2000(self):
        lines = [f"sentence number {i}" for i in range(10_000)]
        seq = run_parallel(lines, ChunkPlan.for_lines(10_000, 2000, 1), self.stage)
        par = run_parallel(lines, ChunkPlan.for_lines(10_000, 2000, 8), self.stage)
        assert par == seq

    def test_order_preserved_with_jitter(self):
        # Later chunks finish first; output order must not change.
        def slow_stage(chunk):
            delay = 0.02 if chunk[0] == "0" else 0.0
            threading.Event().wait(delay)
            return chunk

        lines = [str(i) for i in range(40)]
        plan = ChunkPlan.for_lines(40, 10, 4)
        assert run_parallel(lines, plan, slow_stage) == lines

    def test_chunk_bigger_than_input(self):
        lines = ["a", "b"]
        plan = ChunkPlan.for_lines(2, chunk_size=100, worker_count=3)
        assert len(plan.boundaries) == 1
        assert run_parallel(lines, plan, self.stage) == ["A", "B"]

    def test_empty_input(self):
        plan = ChunkPlan.for_lines(0, 10, 2)
        assert run_parallel([], plan, self.stage) == []

    @pytest.mark.parametrize("workers", [1, 3])
    def test_failure_reports_chunk_index(self, workers):
        def bad_stage(chunk):
            if "boom" in chunk:
                raise RuntimeError("kaput")
            return chunk

        lines = ["a"] * 10 + ["boom"] + ["b"] * 9
        plan = ChunkPlan.for_lines(len(lines), chunk_size=5, worker_count=workers)
        with pytest.raises(ChunkFailure) as exc:
            run_parallel(lines, plan, bad_stage)
        assert exc.value.chunk_index == 2

    def test_count_mismatch_detected(self):
        plan = ChunkPlan.for_lines(4, 2, 1)
        with pytest.raises(ChunkFailure):
            run_parallel(["a", "b", "c", "d"], plan, lambda chunk: chunk[:1])
