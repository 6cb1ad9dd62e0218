"""Command-line interface: translate, bench, selftest, inspect, random-model."""

from __future__ import annotations

import argparse
import sys

from .engine import RunConfig, Translator
from .model import ModelConfig
from .store import (
    PRECISION_F32,
    PRECISIONS,
    describe,
    random_model,
    save,
    synthetic_vocabulary,
)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--precision", choices=PRECISIONS, default=PRECISION_F32)
    p.add_argument("--sbatch", type=int, default=128, help="max sentences per batch")
    p.add_argument("--wbatch", type=int, default=2048, help="max padded tokens per batch")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--chunk-lines", type=int, default=2000, help="lines per parallel task")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--pretokenized", action="store_true",
                   help="input is already tokenized; skip (de)tokenization")
    p.add_argument("--max-len-ratio", type=float, default=1.5)
    p.add_argument("--max-len-offset", type=int, default=5)
    p.add_argument("--bpe-codes", default=None, help="BPE merges file (optional)")


def _run_config(args) -> RunConfig:
    return RunConfig(
        precision=args.precision,
        sbatch=args.sbatch,
        wbatch=args.wbatch,
        workers=args.workers,
        chunk_lines=args.chunk_lines,
        beam=args.beam,
        pretokenized=args.pretokenized,
        max_len_ratio=args.max_len_ratio,
        max_len_offset=args.max_len_offset,
    )


def _read_lines(data: bytes) -> list[str]:
    text = data.decode("utf-8", errors="replace")
    if not text:
        return []
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _load_translator(args) -> Translator:
    return Translator.from_file(args.model, run=_run_config(args), bpe_codes=args.bpe_codes)


def _cmd_translate(args) -> int:
    try:
        translator = _load_translator(args)
    except Exception as exc:  # noqa: BLE001 - report load errors, exit nonzero
        print(f"error: cannot load model: {exc}", file=sys.stderr)
        return 2
    lines = _read_lines(sys.stdin.buffer.read())
    out = translator.translate_lines(lines)
    if out:
        sys.stdout.write("\n".join(out) + "\n")
    return 0 if len(out) == len(lines) else 1


def _cmd_bench(args) -> int:
    try:
        translator = _load_translator(args)
        with open(args.corpus, "rb") as f:
            lines = _read_lines(f.read())
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = translator.bench(lines)
    for key, value in report.items():
        if isinstance(value, float):
            print(f"{key}={value:.6f}")
        else:
            print(f"{key}={value}")
    return 0


def _selftest_model() -> ModelConfig:
    return ModelConfig(
        n_enc_layers=2,
        n_dec_layers=1,
        d_model=32,
        n_heads_enc=2,
        n_heads_dec=1,
        ffn_dim_enc=64,
        ffn_dim_dec=32,
        vocab_size=96,
        max_positions=96,
    )


def _cmd_selftest(args) -> int:
    if args.model:
        try:
            translator = _load_translator(args)
        except Exception as exc:  # noqa: BLE001
            print(f"error: cannot load model: {exc}", file=sys.stderr)
            return 2
    else:
        cfg = _selftest_model()
        weights = random_model(cfg, seed=0)
        vocab = synthetic_vocabulary(cfg.vocab_size)
        translator = Translator(cfg, weights, vocab, run=_run_config(args))
    results = translator.selftest()
    for name, ok, detail in results:
        print(f"case={name} status={'ok' if ok else 'fail'} detail={detail}")
    failed = sum(1 for _, ok, _ in results if not ok)
    print(f"selftest={'pass' if failed == 0 else 'fail'} cases={len(results)} failed={failed}")
    return 0 if failed == 0 else 1


def _cmd_inspect(args) -> int:
    try:
        print(describe(args.model))
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _cmd_random_model(args) -> int:
    try:
        cfg = ModelConfig(
            n_enc_layers=args.enc_layers,
            n_dec_layers=args.dec_layers,
            d_model=args.d_model,
            n_heads_enc=args.heads_enc,
            n_heads_dec=args.heads_dec,
            ffn_dim_enc=args.ffn_enc,
            ffn_dim_dec=args.ffn_dec,
            vocab_size=args.vocab_size,
            max_positions=args.max_positions,
            norm_variant=args.norm,
            shared_embeddings=not args.no_shared_embeddings,
        )
        weights = random_model(cfg, seed=args.seed)
        vocab = synthetic_vocabulary(cfg.vocab_size)
        save(weights, cfg, args.out, precision=args.precision, vocab=vocab)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastnmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("translate", help="translate stdin lines to stdout")
    p.add_argument("--model", required=True)
    _add_run_flags(p)
    p.set_defaults(fn=_cmd_translate)

    p = sub.add_parser("bench", help="translate a corpus file and report throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    _add_run_flags(p)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("selftest", help="run the dirty-data battery")
    p.add_argument("--model", default=None, help="model file (default: tiny random model)")
    _add_run_flags(p)
    p.set_defaults(fn=_cmd_selftest)

    p = sub.add_parser("inspect", help="dump a model file's directory")
    p.add_argument("--model", required=True)
    p.set_defaults(fn=_cmd_inspect)

    p = sub.add_parser("random-model", help="generate a random model file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--enc-layers", type=int, default=6)
    p.add_argument("--dec-layers", type=int, default=1)
    p.add_argument("--d-model", type=int, default=512)
    p.add_argument("--heads-enc", type=int, default=8)
    p.add_argument("--heads-dec", type=int, default=1)
    p.add_argument("--ffn-enc", type=int, default=2048)
    p.add_argument("--ffn-dec", type=int, default=512)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--max-positions", type=int, default=256)
    p.add_argument("--norm", choices=("l2", "l1"), default="l2")
    p.add_argument("--no-shared-embeddings", action="store_true")
    p.add_argument("--precision", choices=PRECISIONS, default=PRECISION_F32)
    p.set_defaults(fn=_cmd_random_model)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
