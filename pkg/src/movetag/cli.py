"""Command-line interface.

Subcommands: corpus stats, calibrate, chunk, index build|inspect,
annotate, evaluate, compare, run.  Exit codes: 0 success, 1 validation
error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .chunking import (
    ChunkingParams,
    build_gold_boundaries,
    calibrate_threshold,
    fixed_window_chunks,
    split_chunks,
)
from .config import ConfigError, validate_config
from .corpus import CorpusError, corpus_stats, load_corpus, load_split_file, filter_min_labels, split_sessions
from .embedding import EmbeddingCache
from .pipeline import (
    StageError,
    build_provider,
    compare_runs,
    compute_scores_by_session,
    evaluate_run_files,
    read_chunk_manifest,
    run_pipeline,
    write_chunk_manifest,
    build_eval_pairs_from_files,
)
from .evaluation import classification_report, format_report
from .retrieval import build_index, load_index, save_index

log = logging.getLogger("movetag")


def _provider_from_file(path):
    return build_provider(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_filtered(args):
    corpus = load_corpus(args.corpus, args.format, dataset=getattr(args, "dataset", ""))
    if getattr(args, "min_labels", 0):
        corpus = filter_min_labels(corpus, args.min_labels)
    return corpus


def cmd_corpus_stats(args) -> int:
    stats = corpus_stats(_load_filtered(args))
    print(json.dumps(stats, indent=2))
    return 0


def cmd_calibrate(args) -> int:
    corpus = _load_filtered(args)
    split = split_sessions(corpus, load_split_file(args.split))
    provider = _provider_from_file(args.provider)
    cache = EmbeddingCache(args.cache_dir) if args.cache_dir else None
    scores = compute_scores_by_session(corpus, split.train_ids, provider, cache, args.w)
    gold = build_gold_boundaries(corpus, split.train_ids)
    calibration = calibrate_threshold(scores, gold)
    payload = calibration.to_dict()
    payload["w"] = args.w
    Path(args.out).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    print(f"tau={calibration.tau:.2f} f1={calibration.f1:.3f} -> {args.out}")
    return 0


def cmd_chunk(args) -> int:
    corpus = _load_filtered(args)
    split = split_sessions(corpus, load_split_file(args.split))
    chunks = []
    if args.fixed_w:
        for sid in split.train_ids:
            chunks.extend(fixed_window_chunks(corpus.session(sid), args.fixed_w))
    else:
        calibration = json.loads(Path(args.calibration).read_text(encoding="utf-8"))
        provider = _provider_from_file(args.provider)
        cache = EmbeddingCache(args.cache_dir) if args.cache_dir else None
        scores = compute_scores_by_session(
            corpus, split.train_ids, provider, cache, calibration["w"]
        )
        params = ChunkingParams(window=calibration["w"], tau=calibration["tau"])
        for sid in split.train_ids:
            chunks.extend(split_chunks(corpus.session(sid), scores[sid], params))
    write_chunk_manifest(chunks, Path(args.out))
    print(f"{len(chunks)} chunks -> {args.out}")
    return 0


def cmd_index_build(args) -> int:
    corpus = _load_filtered(args)
    chunks = read_chunk_manifest(corpus, Path(args.chunks))
    provider = _provider_from_file(args.provider)
    cache = EmbeddingCache(args.cache_dir) if args.cache_dir else None
    index = build_index(chunks, corpus, provider, args.granularity, cache=cache)
    save_index(index, args.out)
    print(f"{len(index)} entries ({args.granularity}) -> {args.out}")
    return 0


def cmd_index_inspect(args) -> int:
    index = load_index(args.index)
    labeled = sum(1 for e in index.entries if e.entry_label is not None)
    print(
        json.dumps(
            {
                "granularity": index.granularity,
                "dim": index.dim,
                "provider": index.provider_id,
                "entries": len(index),
                "labeled_entries": labeled,
                "chunks": len(index.chunks),
                "manifest": index.manifest,
            },
            indent=2,
        )
    )
    return 0


def cmd_run(args) -> int:
    config = validate_config(args.config, overrides={"output_dir": args.output_dir, "k": args.k})
    run_dir = run_pipeline(config)
    print(f"run complete -> {run_dir}")
    print((run_dir / "report.txt").read_text(encoding="utf-8"))
    return 0


def cmd_annotate(args) -> int:
    # Annotation is config-driven; this runs the pipeline through its
    # annotate stage (evaluation included since it is cheap and pure).
    return cmd_run(args)


def cmd_evaluate(args) -> int:
    if args.run_dir:
        results = Path(args.run_dir) / "results.jsonl"
        gold = Path(args.run_dir) / "gold.jsonl"
    else:
        results, gold = Path(args.results), Path(args.gold)
    metrics = evaluate_run_files(results, gold)
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    print(format_report(classification_report(build_eval_pairs_from_files(results, gold))))
    return 0


def cmd_compare(args) -> int:
    comparison = compare_runs(args.run_a, args.run_b, seed=args.seed)
    print(json.dumps(comparison, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="movetag", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_corpus_args(p, with_min=True):
        p.add_argument("--corpus", required=True)
        p.add_argument("--format", default="jsonl", choices=("jsonl", "csv"))
        p.add_argument("--dataset", default="")
        if with_min:
            p.add_argument("--min-labels", dest="min_labels", type=int, default=0)

    p_corpus = sub.add_parser("corpus", help="corpus utilities")
    corpus_sub = p_corpus.add_subparsers(dest="corpus_command", required=True)
    p_stats = corpus_sub.add_parser("stats", help="print dataset statistics")
    add_corpus_args(p_stats)
    p_stats.set_defaults(func=cmd_corpus_stats)

    p_cal = sub.add_parser("calibrate", help="calibrate the boundary threshold")
    add_corpus_args(p_cal)
    p_cal.add_argument("--split", required=True, help="newline-delimited test session ids")
    p_cal.add_argument("--provider", required=True, help="provider config JSON file")
    p_cal.add_argument("--w", type=int, default=2)
    p_cal.add_argument("--cache-dir", dest="cache_dir")
    p_cal.add_argument("--out", required=True)
    p_cal.set_defaults(func=cmd_calibrate)

    p_chunk = sub.add_parser("chunk", help="emit a chunk manifest for the train split")
    add_corpus_args(p_chunk)
    p_chunk.add_argument("--split", required=True)
    p_chunk.add_argument("--provider")
    p_chunk.add_argument("--calibration")
    p_chunk.add_argument("--fixed-w", dest="fixed_w", type=int)
    p_chunk.add_argument("--cache-dir", dest="cache_dir")
    p_chunk.add_argument("--out", required=True)
    p_chunk.set_defaults(func=cmd_chunk)

    p_index = sub.add_parser("index", help="index utilities")
    index_sub = p_index.add_subparsers(dest="index_command", required=True)
    p_build = index_sub.add_parser("build")
    add_corpus_args(p_build)
    p_build.add_argument("--chunks", required=True)
    p_build.add_argument("--provider", required=True)
    p_build.add_argument("--granularity", required=True, choices=("chunk", "utterance"))
    p_build.add_argument("--cache-dir", dest="cache_dir")
    p_build.add_argument("--out", required=True)
    p_build.set_defaults(func=cmd_index_build)
    p_inspect = index_sub.add_parser("inspect")
    p_inspect.add_argument("index")
    p_inspect.set_defaults(func=cmd_index_inspect)

    for name, func in (("run", cmd_run), ("annotate", cmd_annotate)):
        p_run = sub.add_parser(name, help="execute a configured run")
        p_run.add_argument("--config", required=True)
        p_run.add_argument("--output-dir", dest="output_dir")
        p_run.add_argument("--k", type=int)
        p_run.set_defaults(func=func)

    p_eval = sub.add_parser("evaluate", help="evaluate a results file or run directory")
    p_eval.add_argument("--run-dir", dest="run_dir")
    p_eval.add_argument("--results")
    p_eval.add_argument("--gold")
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_evaluate)

    p_cmp = sub.add_parser("compare", help="compare two completed runs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            for item in exc.errors:
                print(f"  - {item}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
