"""Command-line pipeline: synth, build-vocab, tokenize, filter,
build-datastore, cache-eval, tune, eval, analyze.

Every subcommand prints a machine-readable key=value summary as its final
stdout line, exits 0 on success, 1 on a runtime error (with a one-line
diagnostic naming the failing stage), and 2 on usage errors. Each run
writes its resolved configuration as JSON next to its primary output, and
identical inputs plus identical flags produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

_THREAD_ENVS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _summary(**kv) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in kv.items())


def _apply_threads(args) -> None:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("KLM_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        if threads < 1:
            raise ValueError("--threads must be >= 1")
        for var in _THREAD_ENVS:
            os.environ[var] = str(threads)
        os.environ["NUMBA_NUM_THREADS"] = str(threads)


def _echo_config(args, out_path: Path) -> None:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    payload = {"command": args.command, "options": opts}
    cfg = out_path.parent / (out_path.name + ".config.json")
    cfg.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def parse_lambda_grid(spec: str, include_zero: bool = False) -> list[float]:
    """Parse "start:stop:step" (inclusive) or a comma list, exactly in decimal."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError("lambda grid must be start:stop:step or a comma list")
        start, stop, step = (Fraction(p) for p in parts)
        if step <= 0:
            raise ValueError("lambda grid step must be positive")
        values = []
        v = start
        while v <= stop:
            values.append(float(v))
            v += step
    else:
        values = [float(Fraction(p)) for p in spec.split(",") if p]
    if include_zero and 0.0 not in values:
        values = [0.0] + values
    if not values:
        raise ValueError("lambda grid is empty")
    return values


def parse_b_grid(spec: str) -> list[int]:
    """Comma list of bucket counts; "..." fills a doubling run (1,2,4,...,128)."""
    parts = [p for p in spec.split(",") if p]
    values: list[int] = []
    for i, part in enumerate(parts):
        if part == "...":
            if not values or i + 1 >= len(parts):
                raise ValueError("'...' needs a value on both sides")
            target = int(parts[i + 1])
            v = values[-1] * 2
            while v < target:
                values.append(v)
                v *= 2
        else:
            values.append(int(part))
    if not values:
        raise ValueError("b grid is empty")
    return values


def parse_int_list(spec: str) -> list[int]:
    return [int(p) for p in spec.split(",") if p]


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------


def _dense_encoder(args, vocab_size: int):
    from .encoder import DenseEncoder, DenseEncoderConfig

    cfg = DenseEncoderConfig(dim=args.dim, seed=args.seed, decay=args.decay, window=args.window)
    return DenseEncoder(cfg, vocab_size)


def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder", default="dense", help="dense or import:<vector-file>")
    p.add_argument("--dim", type=int, default=256, help="dense encoder dimension")
    p.add_argument("--seed", type=int, default=0, help="dense encoder hash seed")
    p.add_argument("--decay", type=float, default=0.9, help="dense encoder decay")
    p.add_argument("--window", type=int, default=32, help="dense encoder context window")


def _load_table_similarities(args, table, cache):
    """Similarities for a tfidf table (dense ones come from the cache)."""
    if table.partition.kind != "tfidf":
        return None
    if not args.eval_corpus or not args.train_corpus:
        raise ValueError("tfidf tables need --eval-corpus and --train-corpus")
    from .adaptive import tfidf_similarities
    from .corpus import TokenStream

    eval_stream = TokenStream.load(args.eval_corpus)
    train_stream = TokenStream.load(args.train_corpus)
    return tfidf_similarities(cache, eval_stream, train_stream)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> str:
    from .synth import generate_corpus

    corpus = generate_corpus(args.seed, args.train_tokens, args.eval_tokens, args.overlap_rate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text(corpus.train_text)
    (out / "dev.txt").write_text(corpus.dev_text)
    (out / "test.txt").write_text(corpus.test_text)
    _echo_config(args, out / "synth")
    counts = {name: len((getattr(corpus, f"{name}_text")).split()) for name in ("train", "dev", "test")}
    return _summary(
        train_tokens=counts["train"],
        dev_tokens=counts["dev"],
        test_tokens=counts["test"],
        overlap_rate=args.overlap_rate,
        seed=args.seed,
    )


def cmd_build_vocab(args) -> str:
    from .corpus import build_vocab

    text = Path(args.corpus).read_text(encoding="utf-8")
    vocab = build_vocab(text, args.min_count)
    vocab.save(args.out)
    _echo_config(args, Path(args.out))
    return _summary(vocab_size=len(vocab))


def cmd_tokenize(args) -> str:
    from .corpus import Vocab, tokenize

    vocab = Vocab.load(args.vocab)
    stream = tokenize(Path(args.text).read_text(encoding="utf-8"), vocab)
    stream.save(args.out)
    _echo_config(args, Path(args.out))
    return _summary(tokens=len(stream), docs=stream.num_docs, vocab_size=stream.vocab_size)


def cmd_filter(args) -> str:
    from .corpus import TokenStream
    from .ngram_filter import build_mask, find_shared_ngrams

    train = TokenStream.load(args.train)
    eval_stream = TokenStream.load(args.eval)
    matches = find_shared_ngrams(train, eval_stream, args.n)
    mask = build_mask(matches, len(train), args.window)
    mask.save(args.out)
    _echo_config(args, Path(args.out))
    return _summary(matches=len(matches), excluded=mask.excluded_count, corpus_len=len(train))


def cmd_build_datastore(args) -> str:
    from .corpus import TokenStream
    from .datastore import build_datastore
    from .encoder import import_encoder_tag, read_vectors
    from .ngram_filter import PositionMask

    stream = TokenStream.load(args.corpus)
    mask = PositionMask.load(args.mask) if args.mask else None
    if args.encoder == "dense":
        store = build_datastore(stream, encoder=_dense_encoder(args, stream.vocab_size), mask=mask)
    elif args.encoder.startswith("import:"):
        vectors = read_vectors(args.encoder[len("import:") :])
        store = build_datastore(
            stream,
            mask=mask,
            imported_vectors=vectors,
            imported_tag=import_encoder_tag(vectors.shape[1]),
        )
    else:
        raise ValueError(f"unknown encoder {args.encoder!r} (use dense or import:<path>)")
    store.save(args.out)
    _echo_config(args, Path(args.out))
    masked = (len(stream) - stream.num_docs) - len(store)
    return _summary(entries=len(store), dim=store.dim, masked=masked)


def cmd_cache_eval(args) -> str:
    import numpy as np

    from .base_lm import NgramModel, import_base_logprobs
    from .corpus import TokenStream
    from .datastore import Datastore, entry_positions
    from .encoder import import_encoder_tag, read_vectors, write_vectors
    from .eval_cache import build_cache
    from .scorer import perplexity

    eval_stream = TokenStream.load(args.eval)
    store = Datastore.load(args.datastore)
    pos = entry_positions(eval_stream)
    n_records = len(pos)

    kwargs = {}
    if args.encoder == "dense":
        encoder = _dense_encoder(args, eval_stream.vocab_size)
        if args.emit_query_vectors:
            # Query vectors are not cached by default; emit on request.
            queries = encoder.encode_positions(eval_stream, pos)
            write_vectors(args.emit_query_vectors, queries)
            kwargs["query_vectors"] = queries
            kwargs["query_tag"] = encoder.tag
        else:
            kwargs["encoder"] = encoder
    elif args.encoder.startswith("import:"):
        vectors = read_vectors(args.encoder[len("import:") :], expected_dim=store.dim)
        kwargs["query_vectors"] = vectors
        kwargs["query_tag"] = import_encoder_tag(store.dim)
        if args.emit_query_vectors:
            write_vectors(args.emit_query_vectors, vectors)
    else:
        raise ValueError(f"unknown encoder {args.encoder!r} (use dense or import:<path>)")

    if args.base == "ngram":
        if not args.train:
            raise ValueError("--base ngram needs --train <token-stream>")
        train_stream = TokenStream.load(args.train)
        kwargs["base_model"] = NgramModel.train(train_stream, args.order, args.mu)
    elif args.base.startswith("import:"):
        kwargs["base_logprobs"] = import_base_logprobs(args.base[len("import:") :], n_records)
    else:
        raise ValueError(f"unknown base {args.base!r} (use ngram or import:<path>)")

    cache = build_cache(eval_stream, store, k=args.k, **kwargs)
    cache.save(args.out)
    _echo_config(args, Path(args.out))
    base_ppl = perplexity(np.exp(cache.base_logprob))
    return _summary(records=cache.count, k=cache.k, base_ppl=base_ppl)


def cmd_tune(args) -> str:
    from .adaptive import tfidf_similarities, tune
    from .analysis import render_tsv
    from .corpus import TokenStream
    from .eval_cache import EvalCache

    cache = EvalCache.load(args.cache)
    sims = None
    if args.kind == "tfidf":
        if not args.eval_corpus or not args.train_corpus:
            raise ValueError("--kind tfidf needs --eval-corpus and --train-corpus")
        eval_stream = TokenStream.load(args.eval_corpus)
        train_stream = TokenStream.load(args.train_corpus)
        sims = tfidf_similarities(cache, eval_stream, train_stream)
    result = tune(
        cache,
        b_grid=parse_b_grid(args.b_grid),
        lambda_grid=parse_lambda_grid(args.lambda_grid, args.include_zero_lambda),
        kind=args.kind,
        similarities=sims,
        k=args.k,
    )
    result.table.save(args.out)
    rows_path = Path(args.out + ".tuning.tsv")
    rows_path.write_text(
        render_tsv(
            ["per-candidate bucket counts: Dev0 fits boundaries/coefficients, Dev1 selects b"],
            ["b", "dev0_ppl", "dev1_ppl"],
            [[str(r.b), f"{r.dev0_ppl:.6f}", f"{r.dev1_ppl:.6f}"] for r in result.rows],
        )
    )
    _echo_config(args, Path(args.out))
    return _summary(ppl=result.dev_ppl, b=result.b, kind=args.kind)


def cmd_eval(args) -> str:
    from .adaptive import LambdaTable
    from .eval_cache import EvalCache, rescore

    if (args.lam is None) == (args.table is None):
        raise ValueError("provide exactly one of --lambda or --table")
    cache = EvalCache.load(args.cache)
    _echo_config(args, Path(args.cache + ".eval"))
    if args.lam is not None:
        ppl = rescore(cache, args.lam, k=args.k)
        return _summary(ppl=ppl, **{"lambda": args.lam})
    table = LambdaTable.load(args.table)
    sims = _load_table_similarities(args, table, cache)
    ppl = rescore(cache, table, k=args.k, similarities=sims)
    return _summary(ppl=ppl, b=table.b, kind=table.partition.kind)


def cmd_analyze(args) -> str:
    from .adaptive import LambdaTable, tfidf_similarities
    from .analysis import (
        ablation_grid,
        ablation_rows_tsv,
        bucket_improvement_curve,
        bucket_rows_tsv,
        default_min_count,
        group_report,
        group_rows_tsv,
    )
    from .corpus import TokenStream
    from .eval_cache import EvalCache

    cache = EvalCache.load(args.cache)

    def lam_or_table():
        if (args.lam is None) == (args.table is None):
            raise ValueError("provide exactly one of --lambda or --table")
        return args.lam if args.lam is not None else LambdaTable.load(args.table)

    if args.mode == "curve":
        spec = lam_or_table()
        sims = None
        if args.kind == "tfidf":
            if not args.eval_corpus or not args.train_corpus:
                raise ValueError("--kind tfidf needs --eval-corpus and --train-corpus")
            sims = tfidf_similarities(
                cache, TokenStream.load(args.eval_corpus), TokenStream.load(args.train_corpus)
            )
        rows = bucket_improvement_curve(
            cache, spec, n_buckets=args.n_buckets, kind=args.kind, similarities=sims, k=args.k
        )
        text = bucket_rows_tsv(rows)
    elif args.mode == "groups":
        if not args.labels or not args.eval_corpus:
            raise ValueError("--mode groups needs --labels and --eval-corpus")
        eval_stream = TokenStream.load(args.eval_corpus)
        labels = Path(args.labels).read_text(encoding="utf-8").splitlines()
        min_count = args.min_count if args.min_count is not None else default_min_count(cache.count)
        rows = group_report(
            cache, labels, eval_stream, lam_or_table(), min_count=min_count, k=args.k
        )
        text = group_rows_tsv(rows, min_count)
    elif args.mode == "ablation":
        kinds = [s for s in args.kinds.split(",") if s]
        streams = {}
        if "tfidf" in kinds:
            if not args.eval_corpus or not args.train_corpus:
                raise ValueError("tfidf ablation needs --eval-corpus and --train-corpus")
            streams = {
                "eval_stream": TokenStream.load(args.eval_corpus),
                "train_stream": TokenStream.load(args.train_corpus),
            }
        rows = ablation_grid(
            cache,
            kinds=kinds,
            k_list=parse_int_list(args.k_list),
            b_grid=parse_b_grid(args.b_grid),
            lambda_grid=parse_lambda_grid(args.lambda_grid, args.include_zero_lambda),
            **streams,
        )
        text = ablation_rows_tsv(rows)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown mode {args.mode!r}")

    Path(args.out).write_text(text)
    _echo_config(args, Path(args.out))
    return _summary(mode=args.mode, rows=len(rows), out=args.out)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knnlm",
        description="Nearest-neighbor language-model scoring pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func, command=name)
        p.add_argument("--threads", type=int, default=None, help="worker threads (or KLM_THREADS)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic train/dev/test corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-tokens", type=int, default=200_000)
    p.add_argument("--eval-tokens", type=int, default=20_000, help="total across dev and test")
    p.add_argument("--overlap-rate", type=float, default=0.5)

    p = add("build-vocab", cmd_build_vocab, "build a vocabulary from text")
    p.add_argument("--corpus", required=True, help="UTF-8 text file")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("tokenize", cmd_tokenize, "tokenize text into a binary token stream")
    p.add_argument("--text", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = add("filter", cmd_filter, "mask datastore windows sharing n-grams with eval data")
    p.add_argument("--train", required=True, help="datastore-corpus token stream")
    p.add_argument("--eval", required=True, help="evaluation token stream")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--window", type=int, default=200)
    p.add_argument("--out", required=True)

    p = add("build-datastore", cmd_build_datastore, "encode contexts into a key-value store")
    p.add_argument("--corpus", required=True, help="token stream")
    _add_encoder_flags(p)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)

    p = add("cache-eval", cmd_cache_eval, "retrieve top-k for every eval token into a cache")
    p.add_argument("--eval", required=True, help="evaluation token stream")
    p.add_argument("--datastore", required=True)
    _add_encoder_flags(p)
    p.add_argument("--base", default="ngram", help="ngram or import:<base-logprob-file>")
    p.add_argument("--train", default=None, help="training stream (for --base ngram)")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--k", type=int, default=1024)
    p.add_argument("--emit-query-vectors", default=None, metavar="PATH",
                   help="also write the query vectors for external analysis")
    p.add_argument("--out", required=True)

    p = add("tune", cmd_tune, "fit bucket boundaries and per-bucket coefficients")
    p.add_argument("--cache", required=True)
    p.add_argument("--b-grid", default="1,2,4,8,16,32,64,128")
    p.add_argument("--lambda-grid", default="0.05:0.95:0.05")
    p.add_argument("--include-zero-lambda", action="store_true")
    p.add_argument("--kind", choices=["dense", "tfidf"], default="dense")
    p.add_argument("--k", type=int, default=None, help="truncate neighbor lists")
    p.add_argument("--eval-corpus", default=None, help="eval token stream (tfidf)")
    p.add_argument("--train-corpus", default=None, help="train token stream (tfidf)")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score a cache at a static lambda or a tuned table")
    p.add_argument("--cache", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--table", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--eval-corpus", default=None, help="eval token stream (tfidf tables)")
    p.add_argument("--train-corpus", default=None, help="train token stream (tfidf tables)")

    p = add("analyze", cmd_analyze, "bucket curves, group reports, or the ablation grid")
    p.description = (
        "Write a TSV report. Column order: curve -> bucket, count, base_ppl, "
        "variant_ppl, improvement_pct; groups -> label, count, base_ppl, "
        "variant_ppl, improvement_pct; ablation -> kind, k, chosen_b, dev_ppl."
    )
    p.add_argument("--cache", required=True)
    p.add_argument("--mode", choices=["curve", "groups", "ablation"], required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--table", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--kind", choices=["dense", "tfidf"], default="dense")
    p.add_argument("--n-buckets", type=int, default=20)
    p.add_argument("--labels", default=None, help="one label per eval token")
    p.add_argument("--min-count", type=int, default=None)
    p.add_argument("--kinds", default="dense,tfidf")
    p.add_argument("--k-list", default="1,8,64,1024")
    p.add_argument("--b-grid", default="1,2,4,8,16,32,64,128")
    p.add_argument("--lambda-grid", default="0.05:0.95:0.05")
    p.add_argument("--include-zero-lambda", action="store_true")
    p.add_argument("--eval-corpus", default=None)
    p.add_argument("--train-corpus", default=None)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args)
        summary = args.func(args)
    except Exception as exc:  # one-line diagnostic naming the failing stage
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
