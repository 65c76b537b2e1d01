"""End-to-end run orchestration: calibrate, chunk, index, annotate,
evaluate, with manifest-based stage skipping and run comparison.

A run directory is self-describing: results, gold labels, calibration and
index artifacts all live inside it, so evaluation and comparison re-run
from the directory alone.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

from .annotate import (
    HTTPChatClient,
    MockLLMClient,
    ResponseCache,
    read_results_jsonl,
    run_condition,
    write_results_jsonl,
)
from .chunking import (
    CalibrationResult,
    Chunk,
    ChunkingParams,
    build_gold_boundaries,
    calibrate_threshold,
    fixed_window_chunks,
    majority_label_for_span,
    render_span_text,
    smoothed_similarity,
    split_chunks,
)
from .config import ExperimentConfig, RunManifest, stage_input_hash
from .corpus import Corpus, Label, load_corpus, load_split_file, filter_min_labels, split_sessions
from .embedding import DumpFileProvider, EmbeddingCache, HTTPEmbeddingProvider, embed_cached
from .evaluation import (
    EvalPair,
    classification_report,
    confidence_triage,
    format_report,
    mcnemar,
    permutation_test,
    retrieval_match_rate,
)
from .retrieval import build_index, corpus_fingerprint, load_index, save_index

log = logging.getLogger("movetag")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def build_provider(cfg: Optional[dict]):
    if cfg is None:
        return None
    if cfg["type"] == "dump":
        return DumpFileProvider(cfg["path"])
    return HTTPEmbeddingProvider(
        url=cfg["url"],
        model=cfg.get("model", "embedding"),
        api_key_env=cfg.get("api_key_env"),
        batch_size=cfg.get("batch_size", 64),
        retries=cfg.get("retries", 3),
    )


def build_client(cfg: dict, temperature: float = 1.0):
    kind = cfg.get("type", "mock")
    if kind == "mock":
        return MockLLMClient(
            strategy=cfg.get("strategy", "echo_top1"),
            fixed_label=cfg.get("fixed_label"),
            confidence=cfg.get("confidence", 0.9),
            script=cfg.get("script"),
        )
    return HTTPChatClient(
        url=cfg["url"],
        model=cfg.get("model", "chat"),
        api_key_env=cfg.get("api_key_env"),
        temperature=cfg.get("temperature", temperature),
        retries=cfg.get("retries", 3),
    )


def compute_scores_by_session(
    corpus: Corpus, session_ids, provider, cache, w: int
) -> dict[str, dict[int, float]]:
    scores: dict[str, dict[int, float]] = {}
    for sid in session_ids:
        session = corpus.session(sid)
        vectors = embed_cached(provider, [u.text for u in session.utterances], cache=cache)
        scores[sid] = smoothed_similarity(vectors, w)
    return scores


def _stage_fresh(run_dir: Path, stage: str, input_hash: str, outputs: list[Path]) -> bool:
    """True when the stage's manifest matches and its outputs all exist."""
    manifest_path = run_dir / f"{stage}.manifest.json"
    if not manifest_path.exists():
        return False
    try:
        recorded = json.loads(manifest_path.read_text(encoding="utf-8"))["input_hash"]
    except (json.JSONDecodeError, KeyError):
        return False
    return recorded == input_hash and all(p.exists() for p in outputs)


def _write_stage_manifest(run_dir: Path, stage: str, input_hash: str) -> None:
    (run_dir / f"{stage}.manifest.json").write_text(
        json.dumps({"stage": stage, "input_hash": input_hash}), encoding="utf-8"
    )


def write_chunk_manifest(chunks: list[Chunk], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for chunk in chunks:
            handle.write(
                json.dumps(
                    {
                        "chunk_id": chunk.chunk_id,
                        "session_id": chunk.session_id,
                        "start": chunk.start,
                        "end": chunk.end,
                        "majority_label": chunk.majority_label.code
                        if chunk.majority_label
                        else None,
                    }
                )
                + "\n"
            )


def read_chunk_manifest(corpus: Corpus, path: Path) -> list[Chunk]:
    chunks = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            meta = json.loads(line)
            session = corpus.session(meta["session_id"])
            chunks.append(
                Chunk(
                    chunk_id=meta["chunk_id"],
                    session_id=meta["session_id"],
                    start=meta["start"],
                    end=meta["end"],
                    majority_label=Label[meta["majority_label"]]
                    if meta["majority_label"]
                    else None,
                    text=render_span_text(session, meta["start"], meta["end"]),
                )
            )
    return chunks


def build_eval_pairs_from_files(results_path, gold_path) -> list[EvalPair]:
    gold_lookup: dict[tuple[str, int], Label] = {}
    with open(gold_path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                record = json.loads(line)
                gold_lookup[(record["session_id"], record["position"])] = Label[
                    record["gold_label"]
                ]
    pairs = []
    for record in read_results_jsonl(results_path):
        ref = (record["session_id"], record["position"])
        if ref not in gold_lookup:
            continue
        predicted = Label[record["predicted_label"]] if record["predicted_label"] else None
        pairs.append(
            EvalPair(
                gold=gold_lookup[ref],
                predicted=predicted,
                confidence=record["confidence"],
                valid=record["valid"],
                ref=ref,
            )
        )
    return pairs


def evaluate_run_files(results_path, gold_path) -> dict:
    """MetricsReport plus match rates and the triage curve for one run."""
    pairs = build_eval_pairs_from_files(results_path, gold_path)
    report = classification_report(pairs)
    gold_lookup = {p.ref: p.gold for p in pairs}
    traces = []
    for record in read_results_jsonl(results_path):
        ref = (record["session_id"], record["position"])
        if ref not in gold_lookup or not record.get("retrieval"):
            continue
        ranked = [
            Label[t["label"]] if t["label"] else None for t in record["retrieval"]
        ]
        traces.append((gold_lookup[ref], ranked))
    k_values = {record["k"] for record in read_results_jsonl(results_path)}
    k = max(k_values) if k_values else 0
    metrics = {
        "report": report.to_dict(),
        "triage": [
            {
                "threshold": p.threshold,
                "kappa": p.kappa,
                "coverage": p.coverage,
                "retained": p.retained,
            }
            for p in confidence_triage(pairs)
        ],
    }
    if traces:
        metrics["match_rate"] = {
            key: {"top1": rate.top1, "any_k": rate.any_k, "n": rate.n}
            for key, rate in retrieval_match_rate(traces, k).items()
        }
    return metrics


def run_pipeline(config: ExperimentConfig) -> Path:
    """Execute calibrate, chunk, index, annotate and evaluate for one
    condition, skipping stages whose input hashes match a previous run.
    Stage failures abort with the stage name; completed outputs remain for
    resume."""
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )

    try:
        corpus = load_corpus(config.corpus, config.format, dataset=config.dataset)
        if config.min_labels:
            corpus = filter_min_labels(corpus, config.min_labels)
        split = split_sessions(corpus, load_split_file(config.test_split))
    except Exception as exc:
        raise StageError("corpus", exc) from exc
    corpus_hash = corpus_fingerprint(corpus)

    provider = build_provider(config.provider) if config.uses_retrieval else None
    cache = EmbeddingCache(config.cache_dir) if config.cache_dir else None
    stage_hashes: dict[str, str] = {}

    # calibrate: boundary scores everywhere, tau from train gold boundaries
    tau = config.tau
    scores_by_session: dict[str, dict[int, float]] = {}
    if provider is not None:
        calib_hash = stage_input_hash(
            {
                "corpus": corpus_hash,
                "provider": provider.identity,
                "w": config.window,
                "train": list(split.train_ids),
                "tau_override": config.tau,
            }
        )
        stage_hashes["calibrate"] = calib_hash
        calib_path = run_dir / "calibration.json"
        try:
            scores_by_session = compute_scores_by_session(
                corpus, corpus.session_ids(), provider, cache, config.window
            )
            if _stage_fresh(run_dir, "calibrate", calib_hash, [calib_path]):
                tau = json.loads(calib_path.read_text(encoding="utf-8"))["tau"]
                log.info("calibrate: skipped (fresh manifest), tau=%.2f", tau)
            else:
                if tau is None:
                    train_scores = {sid: scores_by_session[sid] for sid in split.train_ids}
                    gold = build_gold_boundaries(corpus, split.train_ids)
                    calibration = calibrate_threshold(train_scores, gold)
                    calibration = CalibrationResult(
                        tau=calibration.tau,
                        window=config.window,
                        f1=calibration.f1,
                        median_cap_applied=calibration.median_cap_applied,
                        median=calibration.median,
                        grid=calibration.grid,
                        f1_curve=calibration.f1_curve,
                    )
                    tau = calibration.tau
                    calib_path.write_text(
                        json.dumps(calibration.to_dict(), indent=2), encoding="utf-8"
                    )
                else:
                    calib_path.write_text(
                        json.dumps({"tau": tau, "w": config.window, "override": True}),
                        encoding="utf-8",
                    )
                _write_stage_manifest(run_dir, "calibrate", calib_hash)
                log.info("calibrate: tau=%.2f", tau)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("calibrate", exc) from exc

    # chunk + index over the train split
    index = None
    if config.uses_retrieval:
        chunk_path = run_dir / "chunks.jsonl"
        index_path = run_dir / "index.bin"
        chunk_hash = stage_input_hash(
            {
                "corpus": corpus_hash,
                "provider": provider.identity,
                "chunking": config.chunking,
                "fixed_w": config.fixed_w,
                "tau": tau,
                "w": config.window,
                "train": list(split.train_ids),
            }
        )
        stage_hashes["chunk"] = chunk_hash
        try:
            if _stage_fresh(run_dir, "chunk", chunk_hash, [chunk_path]):
                chunks = read_chunk_manifest(corpus, chunk_path)
                log.info("chunk: skipped (fresh manifest), %d chunks", len(chunks))
            else:
                chunks = []
                params = ChunkingParams(window=config.window, tau=tau)
                for sid in split.train_ids:
                    session = corpus.session(sid)
                    if config.chunking == "fixed":
                        chunks.extend(fixed_window_chunks(session, config.fixed_w))
                    else:
                        chunks.extend(
                            split_chunks(session, scores_by_session.get(sid, {}), params)
                        )
                write_chunk_manifest(chunks, chunk_path)
                _write_stage_manifest(run_dir, "chunk", chunk_hash)
                log.info("chunk: %d chunks", len(chunks))
        except StageError:
            raise
        except Exception as exc:
            raise StageError("chunk", exc) from exc

        index_hash = stage_input_hash(
            {"chunks": chunk_hash, "granularity": config.granularity}
        )
        stage_hashes["index"] = index_hash
        try:
            if _stage_fresh(run_dir, "index", index_hash, [index_path]):
                index = load_index(index_path)
                log.info("index: skipped (fresh manifest), %d entries", len(index))
            else:
                index = build_index(
                    chunks,
                    corpus,
                    provider,
                    config.granularity,
                    cache=cache,
                    params={"tau": tau},
                )
                save_index(index, index_path)
                _write_stage_manifest(run_dir, "index", index_hash)
                log.info("index: %d entries at %s granularity", len(index), config.granularity)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("index", exc) from exc

    # annotate the labeled tutor utterances of the test split
    results_path = run_dir / "results.jsonl"
    gold_path = run_dir / "gold.jsonl"
    annotate_hash = stage_input_hash(
        {
            "corpus": corpus_hash,
            "condition": config.condition,
            "k": config.k,
            "tau": tau,
            "client": config.client,
            "temperature": config.temperature,
            "test": list(split.test_ids),
            "index": stage_hashes.get("index"),
        }
    )
    stage_hashes["annotate"] = annotate_hash
    try:
        if not _stage_fresh(run_dir, "annotate", annotate_hash, [results_path, gold_path]):
            client = build_client(config.client, config.temperature)
            response_cache = (
                ResponseCache(Path(config.cache_dir) / "responses")
                if config.cache_dir
                else None
            )
            results = run_condition(
                corpus,
                split.test_ids,
                condition=config.condition,
                k=config.k,
                client=client,
                index=index,
                provider=provider,
                scores_by_session=scores_by_session,
                tau=tau,
                embedding_cache=cache,
                response_cache=response_cache,
                concurrency=config.concurrency,
                progress=log.info,
            )
            write_results_jsonl(results, results_path)
            with open(gold_path, "w", encoding="utf-8") as handle:
                for sid in split.test_ids:
                    for utt in corpus.session(sid).utterances:
                        if utt.gold_label is not None:
                            handle.write(
                                json.dumps(
                                    {
                                        "session_id": sid,
                                        "position": utt.position,
                                        "gold_label": utt.gold_label.code,
                                    }
                                )
                                + "\n"
                            )
            _write_stage_manifest(run_dir, "annotate", annotate_hash)
        else:
            log.info("annotate: skipped (fresh manifest)")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("annotate", exc) from exc

    # evaluate
    try:
        metrics = evaluate_run_files(results_path, gold_path)
        (run_dir / "metrics.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8"
        )
        pairs = build_eval_pairs_from_files(results_path, gold_path)
        (run_dir / "report.txt").write_text(
            format_report(classification_report(pairs)) + "\n", encoding="utf-8"
        )
    except Exception as exc:
        raise StageError("evaluate", exc) from exc

    manifest = RunManifest(
        config_hash=config.content_hash(),
        corpus_hash=corpus_hash,
        condition=config.condition,
        k=config.k,
        tau=tau,
        stage_hashes=stage_hashes,
    )
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    return run_dir


def compare_runs(run_a, run_b, n_permutations: int = 2000, seed: int = 0) -> dict:
    """Delta kappa and accuracy with permutation and McNemar p-values for
    two completed run directories sharing a test split."""
    run_a, run_b = Path(run_a), Path(run_b)
    pairs_a = build_eval_pairs_from_files(run_a / "results.jsonl", run_a / "gold.jsonl")
    pairs_b = build_eval_pairs_from_files(run_b / "results.jsonl", run_b / "gold.jsonl")
    refs_a = {p.ref for p in pairs_a}
    refs_b = {p.ref for p in pairs_b}
    if refs_a != refs_b:
        raise ValueError(
            f"runs do not share a test split: {len(refs_a ^ refs_b)} mismatched targets"
        )
    report_a = classification_report(pairs_a)
    report_b = classification_report(pairs_b)
    permutation = permutation_test(pairs_a, pairs_b, n=n_permutations, seed=seed)
    mcn = mcnemar(pairs_a, pairs_b)
    return {
        "run_a": str(run_a),
        "run_b": str(run_b),
        "kappa_a": report_a.kappa,
        "kappa_b": report_b.kappa,
        "delta_kappa": report_a.kappa - report_b.kappa,
        "accuracy_a": report_a.accuracy,
        "accuracy_b": report_b.accuracy,
        "delta_accuracy": report_a.accuracy - report_b.accuracy,
        "aligned_delta_kappa": permutation.delta_kappa,
        "permutation_p": permutation.p_value,
        "mcnemar_p": mcn.p_value,
        "mcnemar_b": mcn.b,
        "mcnemar_c": mcn.c,
        "mcnemar_method": mcn.method,
        "per_label_delta_kappa": {
            code: (
                report_a.per_label_kappa[code] - report_b.per_label_kappa[code]
                if report_a.per_label_kappa[code] is not None
                and report_b.per_label_kappa[code] is not None
                else None
            )
            for code in report_a.per_label_kappa
        },
    }
