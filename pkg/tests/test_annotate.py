"""Prompt rendering (golden-pinned), response parsing, clients, caching and
the annotation loop."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from movetag.annotate import (
    SYSTEM_PROMPT,
    AnnotateError,
    ClientError,
    MockLLMClient,
    ResponseCache,
    annotate_utterance,
    annotation_targets,
    parse_response,
    read_results_jsonl,
    render_prompts,
    run_condition,
    write_results_jsonl,
)
from movetag.chunking import Chunk, fixed_window_chunks
from movetag.corpus import Corpus, Label, Speaker
from movetag.retrieval import (
    RetrievalHit,
    RetrievalResult,
    build_index,
    dynamic_context,
)

from conftest import SyntheticProvider, make_session, separable_corpus

GOLDEN = Path(__file__).parent / "golden"


def demo_window():
    session = make_session(
        "demo",
        [
            (Speaker.STUDENT, "I got twelve.", None),
            (Speaker.TUTOR, "Can you say more about how you got twelve?", None),
            (Speaker.STUDENT, "I multiplied three by four.", None),
        ],
    )
    return dynamic_context(session, 1, {}, tau=None)


def demo_hits():
    chunk_a = Chunk(
        chunk_id="t1:0-1",
        session_id="t1",
        start=0,
        end=1,
        majority_label=Label.ACC,
        text="[tutor] What is three times four?\n[student] Twelve.",
    )
    chunk_b = Chunk(
        chunk_id="t2:0-1",
        session_id="t2",
        start=0,
        end=1,
        majority_label=Label.KET,
        text="[tutor] Everyone look at the board.\n[student] Okay.",
    )
    return RetrievalResult(
        hits=(
            RetrievalHit(score=0.9, chunk=chunk_a, entry_label=Label.ACC),
            RetrievalHit(score=0.7, chunk=chunk_b, entry_label=Label.KET),
        ),
        k=2,
        excluded_session="demo",
    )


# ---------------------------------------------------------------------------
# prompt rendering


def test_system_prompt_matches_golden():
    golden = (GOLDEN / "system_prompt.txt").read_text(encoding="utf-8")
    assert SYSTEM_PROMPT + "\n" == golden


def test_user_prompt_matches_golden():
    bundle = render_prompts(demo_window(), demo_hits(), "tutor")
    golden = (GOLDEN / "user_prompt_k2.txt").read_text(encoding="utf-8")
    assert bundle.user + "\n" == golden


def test_user_prompt_no_rag_matches_golden():
    bundle = render_prompts(demo_window(), None, "tutor")
    golden = (GOLDEN / "user_prompt_no_rag.txt").read_text(encoding="utf-8")
    assert bundle.user + "\n" == golden
    assert "Example" not in bundle.user


def test_render_is_pure():
    first = render_prompts(demo_window(), demo_hits(), "tutor")
    second = render_prompts(demo_window(), demo_hits(), "tutor")
    assert first == second


def test_render_k3_block_order():
    hits = demo_hits()
    extra = RetrievalHit(
        score=0.5,
        chunk=Chunk("t3:0-0", "t3", 0, 0, None, "[student] Hmm."),
        entry_label=None,
    )
    retrieved = RetrievalResult(hits=hits.hits + (extra,), k=3, excluded_session="demo")
    bundle = render_prompts(demo_window(), retrieved, "tutor")
    lines = [l for l in bundle.user.split("\n") if l.startswith("Example ")]
    assert lines == [
        "Example 1 (labeled: Pressing for Accuracy)",
        "Example 2 (labeled: Keeping Everyone Together)",
        "Example 3 (labeled: None)",
    ]
    assert bundle.token_estimate > 0


def test_render_rejects_target_session_examples():
    hits = demo_hits()
    leaky = RetrievalHit(
        score=0.4,
        chunk=Chunk("demo:0-0", "demo", 0, 0, Label.ACC, "[student] I got twelve."),
        entry_label=Label.ACC,
    )
    retrieved = RetrievalResult(hits=hits.hits + (leaky,), k=3, excluded_session="demo")
    with pytest.raises(AnnotateError, match="leakage"):
        render_prompts(demo_window(), retrieved, "tutor")


def test_render_requires_marked_window():
    window = demo_window()
    broken = type(window)(
        session_id=window.session_id,
        target=window.target,
        lo=window.lo,
        hi=window.hi,
        text="[tutor] no marker here",
        target_speaker="tutor",
    )
    with pytest.raises(AnnotateError, match="exactly one target line"):
        render_prompts(broken, None, "tutor")


# ---------------------------------------------------------------------------
# response parsing


def test_parse_direct_mapping():
    parsed = parse_response('{"label": "Pressing for Accuracy", "confidence": 0.9}')
    assert parsed.valid
    assert parsed.label is Label.ACC
    assert parsed.confidence == pytest.approx(0.9)


def test_parse_null_label_valid():
    parsed = parse_response('{"label": null, "confidence": 0.4}')
    assert parsed.valid
    assert parsed.label is None
    assert parsed.confidence == pytest.approx(0.4)


def test_parse_fenced_with_clamp():
    raw = 'Sure! Here is my answer:\n```json\n{"label": "ACC", "confidence": 1.7}\n```\nDone.'
    parsed = parse_response(raw)
    assert parsed.valid
    assert parsed.label is Label.ACC
    assert parsed.confidence == 1.0
    assert "clamped" in parsed.note


def test_parse_code_and_case_insensitive():
    assert parse_response('{"label": "rev", "confidence": 0.2}').label is Label.REV
    assert parse_response('{"label": "restating", "confidence": 0.2}').label is Label.RES
    assert parse_response('{"label": "None", "confidence": 0.2}').label is None


def test_parse_failures_are_invalid_not_crashes():
    assert not parse_response("no json here").valid
    assert not parse_response('{"label": "Quizzing", "confidence": 0.5}').valid
    assert not parse_response('{"confidence": 0.5}').valid
    assert not parse_response('{"label": "ACC"}').valid
    assert not parse_response('{"label": "ACC", "confidence": "high"}').valid
    assert not parse_response("{broken json").valid


def test_parse_first_object_wins():
    raw = 'text {"label": "KET", "confidence": 0.6} and {"label": "ACC", "confidence": 0.9}'
    assert parse_response(raw).label is Label.KET


def test_parse_numeric_string_confidence():
    parsed = parse_response('{"label": "ACC", "confidence": "0.75"}')
    assert parsed.valid
    assert parsed.confidence == pytest.approx(0.75)


# ---------------------------------------------------------------------------
# mock clients and cache


def test_mock_echo_top1():
    client = MockLLMClient("echo_top1")
    bundle = render_prompts(demo_window(), demo_hits(), "tutor")
    parsed = parse_response(client.complete(bundle.system, bundle.user).text)
    assert parsed.label is Label.ACC

    no_rag = render_prompts(demo_window(), None, "tutor")
    parsed = parse_response(client.complete(no_rag.system, no_rag.user).text)
    assert parsed.label is None


def test_mock_fixed_and_scripted():
    fixed = MockLLMClient("fixed", fixed_label="Revoicing", confidence=0.8)
    parsed = parse_response(fixed.complete("s", "u").text)
    assert parsed.label is Label.REV
    scripted = MockLLMClient("scripted", script=['{"label": "GSR", "confidence": 1.0}'])
    assert parse_response(scripted.complete("s", "u").text).label is Label.GSR
    with pytest.raises(ClientError):
        scripted.complete("s", "u")


def test_response_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path)
    assert cache.get("m", 1.0, "sys", "user", 0) is None
    cache.put("m", 1.0, "sys", "user", 0, '{"label": null, "confidence": 0}')
    assert cache.get("m", 1.0, "sys", "user", 0) == '{"label": null, "confidence": 0}'
    # temperature is part of the key
    assert cache.get("m", 0.5, "sys", "user", 0) is None


# ---------------------------------------------------------------------------
# annotation loop


def build_test_setup(granularity="utterance"):
    corpus = separable_corpus(n_sessions=6, per_session=12)
    train = corpus.session_ids()[:4]
    chunks = []
    for sid in train:
        chunks.extend(fixed_window_chunks(corpus.session(sid), 4))
    provider = SyntheticProvider()
    index = build_index(chunks, corpus, provider, granularity)
    return corpus, train, corpus.session_ids()[4:], provider, index


def test_annotate_echoes_top1_label():
    corpus, _, test_ids, provider, index = build_test_setup()
    client = MockLLMClient("echo_top1")
    sid = test_ids[0]
    for utt in corpus.session(sid).utterances:
        if utt.gold_label is None:
            continue
        result = annotate_utterance(
            corpus, sid, utt.position,
            condition="rag_finetuned_utt", k=3, client=client,
            index=index, provider=provider,
        )
        assert result.valid
        # separable embeddings: top-1 retrieved entry shares the gold label,
        # and the echo mock reflects it back
        assert result.retrieval[0].label is utt.gold_label
        assert result.predicted_label is utt.gold_label
        assert all(index.chunks[t.chunk_id] for t in result.retrieval)


def test_annotate_k0_completes():
    corpus, _, test_ids, provider, index = build_test_setup()
    client = MockLLMClient("fixed", fixed_label="ACC", confidence=0.5)
    sid = test_ids[0]
    pos = next(u.position for u in corpus.session(sid).utterances if u.gold_label)
    result = annotate_utterance(
        corpus, sid, pos, condition="no_rag", k=0, client=client,
    )
    assert result.valid
    assert result.retrieval == ()
    assert result.predicted_label is Label.ACC


def test_annotate_rejects_student_targets():
    corpus, _, test_ids, provider, index = build_test_setup()
    with pytest.raises(AnnotateError, match="not a tutor"):
        annotate_utterance(
            corpus, test_ids[0], 1, condition="no_rag", k=0,
            client=MockLLMClient("fixed", fixed_label="ACC"),
        )


def test_annotate_cached_rerun_zero_calls(tmp_path):
    corpus, _, test_ids, provider, index = build_test_setup()
    cache = ResponseCache(tmp_path)
    client = MockLLMClient("echo_top1")
    sid = test_ids[0]
    pos = next(u.position for u in corpus.session(sid).utterances if u.gold_label)
    kwargs = dict(
        condition="rag_finetuned_utt", k=3, client=client, index=index,
        provider=provider, response_cache=cache,
    )
    first = annotate_utterance(corpus, sid, pos, **kwargs)
    calls_after_first = client.calls
    assert calls_after_first == 1
    second = annotate_utterance(corpus, sid, pos, **kwargs)
    assert client.calls == calls_after_first
    assert first == second


def test_annotate_retries_on_parse_failure():
    corpus, _, test_ids, provider, index = build_test_setup()
    client = MockLLMClient(
        "scripted",
        script=["not json", "still not json", '{"label": "ACC", "confidence": 0.7}'],
    )
    sid = test_ids[0]
    pos = next(u.position for u in corpus.session(sid).utterances if u.gold_label)
    result = annotate_utterance(corpus, sid, pos, condition="no_rag", k=0, client=client)
    assert result.valid
    assert result.predicted_label is Label.ACC
    assert client.calls == 3


def test_annotate_invalid_after_retry_budget():
    corpus, _, test_ids, provider, index = build_test_setup()
    client = MockLLMClient("scripted", script=["junk", "junk", "junk", "junk"])
    sid = test_ids[0]
    pos = next(u.position for u in corpus.session(sid).utterances if u.gold_label)
    result = annotate_utterance(corpus, sid, pos, condition="no_rag", k=0, client=client)
    assert not result.valid
    assert result.predicted_label is None
    assert client.calls == 3  # initial call + 2 retries


def test_annotate_transport_failure_is_invalid():
    corpus, _, test_ids, provider, index = build_test_setup()

    class Failing:
        model = "down"
        temperature = 1.0

        def complete(self, system, user):
            raise ClientError("endpoint unreachable")

    sid = test_ids[0]
    pos = next(u.position for u in corpus.session(sid).utterances if u.gold_label)
    result = annotate_utterance(corpus, sid, pos, condition="no_rag", k=0, client=Failing())
    assert not result.valid
    assert "transport failure" in result.note


def test_run_condition_end_to_end():
    corpus, train, test_ids, provider, index = build_test_setup()
    client = MockLLMClient("echo_top1")
    results = run_condition(
        corpus, test_ids,
        condition="rag_finetuned_utt", k=3, client=client,
        index=index, provider=provider, concurrency=4,
    )
    targets = annotation_targets(corpus, test_ids)
    assert [(r.session_id, r.position) for r in results] == targets
    assert all(r.valid for r in results)
    assert len(results) == len(targets)


def test_run_condition_deterministic_order_any_concurrency():
    corpus, train, test_ids, provider, index = build_test_setup()
    runs = []
    for concurrency in (1, 4):
        client = MockLLMClient("echo_top1")
        runs.append(
            run_condition(
                corpus, test_ids,
                condition="rag_finetuned_utt", k=3, client=client,
                index=index, provider=provider, concurrency=concurrency,
            )
        )
    assert runs[0] == runs[1]


def test_results_jsonl_round_trip(tmp_path):
    corpus, train, test_ids, provider, index = build_test_setup()
    client = MockLLMClient("echo_top1")
    results = run_condition(
        corpus, test_ids[:1],
        condition="rag_finetuned_utt", k=3, client=client,
        index=index, provider=provider,
    )
    path = tmp_path / "results.jsonl"
    write_results_jsonl(results, path)
    records = read_results_jsonl(path)
    assert len(records) == len(results)
    assert records[0]["session_id"] == results[0].session_id
    assert records[0]["predicted_label"] == results[0].predicted_label.code
    assert records[0]["retrieval"][0]["chunk_id"] == results[0].retrieval[0].chunk_id
