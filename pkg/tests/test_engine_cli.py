import subprocess
import sys

import numpy as np
import pytest

from fastnmt.engine import RunConfig, Translator
from fastnmt.store import random_model, save, synthetic_vocabulary

from helpers import make_text_assets, synth_corpus, tiny_config


@pytest.fixture(scope="module")
def assets():
    codec, vocab = make_text_assets()
    cfg = tiny_config(vocab_size=len(vocab), d_model=16, max_positions=64)
    weights = random_model(cfg, seed=5)
    return cfg, weights, vocab, codec


def translator(assets, **run_kwargs):
    cfg, weights, vocab, codec = assets
    return Translator(cfg, weights, vocab, codec=codec, run=RunConfig(**run_kwargs))


class TestTranslateLines:
    def test_line_counts_and_empties(self, assets):
        tr = translator(assets)
        lines = ["the quick fox", "", "lazy dog.", "", ""]
        out = tr.translate_lines(lines)
        assert len(out) == len(lines)
        for src, dst in zip(lines, out):
            if src == "":
                assert dst == ""

    def test_deterministic_across_runs(self, assets):
        tr = translator(assets)
        rng = np.random.default_rng(0)
        lines = synth_corpus(rng, 30)
        assert tr.translate_lines(lines) == tr.translate_lines(lines)

    @pytest.mark.parametrize("workers", [2, 4, 8])
    def test_worker_count_invariance(self, assets, workers):
        rng = np.random.default_rng(1)
        lines = synth_corpus(rng, 40)
        seq = translator(assets, workers=1, chunk_lines=7).translate_lines(lines)
        par = translator(assets, workers=workers, chunk_lines=7).translate_lines(lines)
        assert par == seq

    def test_batch_caps_do_not_change_output(self, assets):
        rng = np.random.default_rng(2)
        lines = synth_corpus(rng, 48)
        a = translator(assets, sbatch=1, wbatch=16).translate_lines(lines)
        b = translator(assets, sbatch=8, wbatch=128).translate_lines(lines)
        c = translator(assets, sbatch=128, wbatch=2048).translate_lines(lines)
        assert a == b == c

    def test_pretokenized_mode(self, assets):
        tr = translator(assets, pretokenized=True)
        out = tr.translate_lines(["the quick , fox"])
        assert len(out) == 1

    def test_long_line_is_split_and_rejoined(self, assets):
        tr = translator(assets)
        long_line = "the quick brown fox " * 600  # far beyond max_positions
        out = tr.translate_lines([long_line, "short one"])
        assert len(out) == 2
        assert out[0] != ""

    def test_beam_mode_runs(self, assets):
        tr = translator(assets, beam=2)
        out = tr.translate_lines(["the quick fox", "lazy dog"])
        assert len(out) == 2

    def test_empty_corpus(self, assets):
        assert translator(assets).translate_lines([]) == []

    def test_unknown_words_survive(self, assets):
        tr = translator(assets)
        out = tr.translate_lines(["zzz qqq 😀"])
        assert len(out) == 1


class TestInt8Engine:
    def test_int8_pipeline_runs_and_counts(self, assets, tmp_path):
        cfg, weights, vocab, codec = assets
        p = tmp_path / "m.fnmt"
        save(weights, cfg, p, precision="int8", vocab=vocab)
        tr = Translator.from_file(p, run=RunConfig(precision="int8"))
        tr.codec = codec
        rng = np.random.default_rng(4)
        lines = synth_corpus(rng, 20)
        out = tr.translate_lines(lines)
        assert len(out) == len(lines)

    def test_int8_worker_invariance(self, assets, tmp_path):
        cfg, weights, vocab, codec = assets
        p = tmp_path / "m.fnmt"
        save(weights, cfg, p, precision="int8", vocab=vocab)
        rng = np.random.default_rng(5)
        lines = synth_corpus(rng, 30)
        outs = []
        for workers in (1, 4):
            tr = Translator.from_file(p, run=RunConfig(precision="int8", workers=workers, chunk_lines=6))
            tr.codec = codec
            outs.append(tr.translate_lines(lines))
        assert outs[0] == outs[1]


class TestBenchReport:
    def test_doubling_corpus_roughly_doubles_wall_time(self, assets):
        # chunk_lines=100 makes the doubled corpus decompose into exact
        # copies of the original chunks, so decode work scales cleanly
        # (larger chunks let length-sorting pack fuller batches instead).
        rng = np.random.default_rng(7)
        base = synth_corpus(rng, 200)
        tr = translator(assets, chunk_lines=100)
        tr.translate_lines(base[:20])  # warm up
        small = min(tr.bench(base)["wall_seconds"] for _ in range(3))
        big = min(tr.bench(base + base)["wall_seconds"] for _ in range(3))
        assert 1.5 <= big / small <= 2.5

    def test_metric_identity_and_keys(self, assets):
        tr = translator(assets)
        rng = np.random.default_rng(6)
        lines = synth_corpus(rng, 25)
        report = tr.bench(lines)
        words = sum(len(l.split()) for l in lines)
        assert report["source_words"] == words
        assert report["source_sentences"] == len(lines)
        assert report["output_lines"] == len(lines)
        assert report["words_per_second"] == pytest.approx(
            words / report["wall_seconds"], rel=1e-9
        )
        assert report["est_peak_bytes"] > 0
        for key in ("sbatch", "wbatch", "workers", "chunk_lines", "precision"):
            assert key in report


class TestSelftestBattery:
    def test_all_cases_pass(self, assets):
        results = translator(assets).selftest()
        assert all(ok for _, ok, _ in results), results
        names = [n for n, _, _ in results]
        assert "very_long_line" in names and "dirty_bytes" in names


def run_cli(*args, stdin=b""):
    return subprocess.run(
        [sys.executable, "-m", "fastnmt.cli", *args],
        input=stdin,
        capture_output=True,
        timeout=300,
    )


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "model.fnmt"
    cfg = tiny_config(vocab_size=100, d_model=16, max_positions=64)
    weights = random_model(cfg, seed=9)
    save(weights, cfg, path, precision="f32", vocab=synthetic_vocabulary(100))
    return path


class TestCli:
    def test_translate_stdin_stdout(self, model_file):
        r = run_cli("translate", "--model", str(model_file), stdin=b"hello world\nsecond line\n")
        assert r.returncode == 0, r.stderr
        assert len(r.stdout.decode().splitlines()) == 2

    def test_empty_stdin(self, model_file):
        r = run_cli("translate", "--model", str(model_file), stdin=b"")
        assert r.returncode == 0
        assert r.stdout == b""

    def test_empty_lines_preserved(self, model_file):
        r = run_cli("translate", "--model", str(model_file), stdin=b"a\n\nb\n")
        lines = r.stdout.decode().split("\n")
        assert lines[1] == ""

    def test_missing_model_exits_nonzero(self, tmp_path):
        r = run_cli("translate", "--model", str(tmp_path / "missing.fnmt"), stdin=b"x\n")
        assert r.returncode == 2
        assert b"cannot load model" in r.stderr

    def test_bench_reports_key_values(self, model_file, tmp_path):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("one two three\nfour five\n" * 10, encoding="utf-8")
        r = run_cli("bench", "--model", str(model_file), "--corpus", str(corpus))
        assert r.returncode == 0, r.stderr
        report = dict(
            line.split("=", 1) for line in r.stdout.decode().splitlines() if "=" in line
        )
        assert float(report["words_per_second"]) > 0
        assert int(report["source_words"]) == 50
        assert report["precision"] == "f32"

    def test_selftest_builtin_model(self):
        r = run_cli("selftest")
        assert r.returncode == 0, r.stdout + r.stderr
        assert b"selftest=pass" in r.stdout

    def test_inspect(self, model_file):
        r = run_cli("inspect", "--model", str(model_file))
        assert r.returncode == 0
        assert b"src_embed" in r.stdout and b"config:" in r.stdout

    def test_random_model_generation(self, tmp_path):
        out = tmp_path / "gen.fnmt"
        r = run_cli(
            "random-model", "--out", str(out), "--d-model", "32", "--enc-layers", "2",
            "--ffn-enc", "64", "--ffn-dec", "32", "--vocab-size", "64",
            "--max-positions", "64", "--heads-enc", "2",
        )
        assert r.returncode == 0, r.stderr
        r2 = run_cli("translate", "--model", str(out), stdin=b"check this\n")
        assert r2.returncode == 0
        assert len(r2.stdout.decode().splitlines()) == 1

    def test_int8_flag_roundtrip(self, tmp_path):
        out = tmp_path / "gen8.fnmt"
        r = run_cli(
            "random-model", "--out", str(out), "--precision", "int8", "--d-model", "32",
            "--enc-layers", "2", "--ffn-enc", "64", "--ffn-dec", "32",
            "--vocab-size", "64", "--max-positions", "64", "--heads-enc", "2",
        )
        assert r.returncode == 0, r.stderr
        r2 = run_cli(
            "translate", "--model", str(out), "--precision", "int8", stdin=b"check this\n"
        )
        assert r2.returncode == 0, r2.stderr
        assert len(r2.stdout.decode().splitlines()) == 1
