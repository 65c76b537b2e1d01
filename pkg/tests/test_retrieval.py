"""Index construction, dynamic context windows, query building and exact
search with session exclusion."""

from __future__ import annotations

import numpy as np
import pytest

from movetag.chunking import ChunkingParams, fixed_window_chunks, split_chunks
from movetag.corpus import Corpus, Label, Speaker
from movetag.embedding import EmbeddingError, embed_cached, renormalize_centered
from movetag.retrieval import (
    RetrievalError,
    TARGET_MARKER,
    build_index,
    build_query,
    corpus_fingerprint,
    dynamic_context,
    load_index,
    save_index,
    search,
    search_entries,
    window_query_text,
)

from conftest import LABELS, SyntheticProvider, make_session, separable_corpus, unit


def train_chunks(corpus, session_ids, w=4):
    chunks = []
    for sid in session_ids:
        chunks.extend(fixed_window_chunks(corpus.session(sid), w))
    return chunks


@pytest.fixture
def small_index(corpus, provider):
    sids = corpus.session_ids()[:4]
    return build_index(train_chunks(corpus, sids), corpus, provider, "utterance")


# ---------------------------------------------------------------------------
# build_index


def test_utterance_index_entries_all_labeled(corpus, provider):
    sids = corpus.session_ids()[:4]
    chunks = train_chunks(corpus, sids)
    index = build_index(chunks, corpus, provider, "utterance")
    labeled = sum(
        1
        for sid in sids
        for u in corpus.session(sid).utterances
        if u.gold_label is not None
    )
    assert len(index) == labeled
    assert all(e.entry_label is not None for e in index.entries)
    assert all(e.utterance_ref is not None for e in index.entries)
    assert all(e.chunk_ref in index.chunks for e in index.entries)


def test_chunk_index_one_entry_per_chunk(corpus, provider):
    sids = corpus.session_ids()[:4]
    chunks = train_chunks(corpus, sids)
    index = build_index(chunks, corpus, provider, "chunk")
    assert len(index) == len(chunks)
    for entry, chunk in zip(index.entries, chunks):
        assert entry.chunk_ref == chunk.chunk_id
        assert entry.entry_label == chunk.majority_label


def test_index_centering_property(corpus, provider, small_index):
    # re-embed the indexed texts and check the centered mean vanishes
    sids = corpus.session_ids()[:4]
    texts = [
        corpus.session(sid).utterances[pos].text
        for sid in sids
        for pos in range(len(corpus.session(sid)))
        if corpus.session(sid).utterances[pos].gold_label is not None
    ]
    raw = embed_cached(provider, texts)
    centered = raw - small_index.centering.mean
    d = raw.shape[1]
    assert np.linalg.norm(centered.mean(axis=0)) < 1e-6 * np.sqrt(d)
    # stored vectors are the centered rows re-normalized (after f32 rounding)
    np.testing.assert_allclose(
        small_index.vectors, renormalize_centered(centered), atol=1e-6
    )


def test_build_index_errors(corpus, provider):
    with pytest.raises(RetrievalError, match="granularity"):
        build_index([], corpus, provider, "paragraph")
    unlabeled = Corpus(
        (make_session("u", [(Speaker.TUTOR, "plain text", None)]),)
    )
    chunks = fixed_window_chunks(unlabeled.session("u"), 2)
    with pytest.raises(RetrievalError, match="no entries"):
        build_index(chunks, unlabeled, provider, "utterance")


def test_index_build_deterministic(corpus, provider, tmp_path):
    sids = corpus.session_ids()[:4]
    paths = []
    for name in ("a.bin", "b.bin"):
        index = build_index(
            train_chunks(corpus, sids), corpus, provider, "utterance", params={"tau": 0.5}
        )
        path = tmp_path / name
        save_index(index, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_index_file_round_trip(corpus, provider, small_index, tmp_path):
    path = tmp_path / "index.bin"
    save_index(small_index, path)
    loaded = load_index(path)
    assert loaded.granularity == small_index.granularity
    assert loaded.provider_id == small_index.provider_id
    assert len(loaded) == len(small_index)
    np.testing.assert_array_equal(loaded.vectors, small_index.vectors)
    np.testing.assert_allclose(loaded.centering.mean, small_index.centering.mean)
    assert loaded.entries == small_index.entries
    assert loaded.chunks == small_index.chunks


# ---------------------------------------------------------------------------
# dynamic context


def long_session(n=40, sid="s"):
    return make_session(sid, [(Speaker.TUTOR, f"text {i}", None) for i in range(n)])


def test_context_caps_at_ten_each_way():
    window = dynamic_context(long_session(), 20, {}, tau=0.5)
    assert (window.lo, window.hi) == (10, 30)
    assert window.text.count(TARGET_MARKER) == 1


def test_context_stops_at_forward_boundary():
    window = dynamic_context(long_session(), 20, {21: 0.1}, tau=0.5)
    assert (window.lo, window.hi) == (10, 20)


def test_context_stops_at_backward_boundary():
    window = dynamic_context(long_session(), 20, {20: 0.1}, tau=0.5)
    assert (window.lo, window.hi) == (20, 30)


def test_context_at_session_edges():
    window = dynamic_context(long_session(8), 0, {}, tau=0.5)
    assert (window.lo, window.hi) == (0, 7)
    window = dynamic_context(long_session(8), 7, {}, tau=0.5)
    assert (window.lo, window.hi) == (0, 7)


def test_context_shrinking_tau_never_enlarges():
    rng = np.random.default_rng(37)
    session = long_session(30)
    scores = {int(i): float(rng.random()) for i in range(1, 30)}
    spans = []
    for tau in (0.9, 0.6, 0.3, 0.0):
        window = dynamic_context(session, 15, scores, tau)
        spans.append(window.hi - window.lo)
        assert 0 <= window.lo <= 15 <= window.hi <= 29
    assert spans == sorted(spans)


def test_context_marker_line():
    session = make_session(
        "s",
        [
            (Speaker.STUDENT, "I got twelve.", None),
            (Speaker.TUTOR, "How did you get it?", None),
        ],
    )
    window = dynamic_context(session, 1, {}, tau=None)
    assert window.text == (
        "[student] I got twelve.\n"
        f"{TARGET_MARKER} [tutor] How did you get it?"
    )
    assert window.target_speaker == "tutor"


# ---------------------------------------------------------------------------
# build_query


def test_query_utterance_granularity_embeds_target_alone(corpus, provider, small_index):
    session = corpus.session(corpus.session_ids()[4])
    window = dynamic_context(session, 0, {}, tau=None)
    query = build_query(window, session, small_index, provider)
    raw = embed_cached(provider, [session.utterances[0].text])[0]
    want = renormalize_centered(small_index.centering.apply(raw))[0]
    np.testing.assert_allclose(query, want, atol=1e-12)


def test_query_single_utterance_window_reduces_to_target(corpus, provider):
    # chunk-granularity query over a one-utterance window embeds a window
    # rendering containing exactly the target utterance
    session = corpus.session(corpus.session_ids()[4])
    chunks = train_chunks(corpus, corpus.session_ids()[:4])
    index = build_index(chunks, corpus, provider, "chunk")
    target = 2
    window = dynamic_context(session, target, {2: 0.0, 3: 0.0}, tau=0.5)
    assert (window.lo, window.hi) == (target, target)
    text = window_query_text(session, window)
    utt = session.utterances[target]
    assert text == f"[{utt.speaker.value}] {utt.text}"
    query = build_query(window, session, index, provider)
    raw = embed_cached(provider, [text])[0]
    np.testing.assert_allclose(
        query, renormalize_centered(index.centering.apply(raw))[0], atol=1e-12
    )


def test_query_identical_text_scores_one(corpus, provider, small_index):
    # same text, same provider, same transform: cosine with that entry is 1
    entry = small_index.entries[0]
    sid, pos = entry.utterance_ref
    target_session = make_session(
        "fresh", [(Speaker.TUTOR, corpus.session(sid).utterances[pos].text, None)]
    )
    window = dynamic_context(target_session, 0, {}, tau=None)
    query = build_query(window, target_session, small_index, provider)
    scores = small_index.vectors @ query
    assert scores[0] == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# search


def random_index(rng, n, d=8, n_sessions=5, unique_chunks=True):
    """Hand-assembled index with random unit vectors for oracle tests."""
    from movetag.chunking import Chunk
    from movetag.retrieval import IndexEntry, VectorIndex
    from movetag.embedding import CenteringTransform

    vectors = rng.normal(size=(n, d))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    if n >= 6:  # plant exact ties
        vectors[2] = vectors[0]
        vectors[5] = vectors[0]
    entries = []
    chunks = {}
    for i in range(n):
        sid = f"sess{int(rng.integers(n_sessions))}"
        chunk_id = f"c{i}" if unique_chunks else f"c{int(rng.integers(max(n // 3, 1)))}"
        if chunk_id not in chunks:
            chunks[chunk_id] = Chunk(
                chunk_id=chunk_id,
                session_id=sid,
                start=0,
                end=0,
                majority_label=LABELS[i % len(LABELS)],
                text=f"chunk {chunk_id}",
            )
        entries.append(
            IndexEntry(
                session_id=sid,
                chunk_ref=chunk_id,
                utterance_ref=(sid, i),
                entry_label=LABELS[i % len(LABELS)],
            )
        )
    return VectorIndex(
        granularity="utterance",
        centering=CenteringTransform(np.zeros(d)),
        vectors=vectors,
        entries=entries,
        chunks=chunks,
        provider_id="test",
        manifest={"granularity": "utterance", "dim": d, "n_entries": n, "provider": "test"},
    )


def oracle_search(index, query, k, exclude_session):
    scores = [float(np.sum(index.vectors[i] * query)) for i in range(len(index))]
    ranked = sorted(
        (i for i, e in enumerate(index.entries) if e.session_id != exclude_session),
        key=lambda i: (-scores[i], i),
    )
    return [(scores[i], i) for i in ranked[:k]]


def test_search_k_zero_empty(small_index):
    query = np.zeros(small_index.dim)
    result = search(small_index, query, 0, exclude_session="nope")
    assert result.hits == ()


def test_search_excludes_session():
    rng = np.random.default_rng(41)
    index = random_index(rng, 3, n_sessions=2)
    query = unit(rng.normal(size=8))
    excluded = index.entries[0].session_id
    in_excluded = sum(1 for e in index.entries if e.session_id == excluded)
    result = search(index, query, 3, exclude_session=excluded)
    assert len(result.hits) == 3 - in_excluded
    assert all(h.chunk.session_id != excluded for h in result.hits)


def test_search_matches_oracle_fuzz():
    rng = np.random.default_rng(43)
    for _ in range(50):
        n = int(rng.integers(1, 300))
        index = random_index(rng, n)
        query = unit(rng.normal(size=8))
        k = int(rng.integers(0, 12))
        excluded = f"sess{int(rng.integers(5))}"
        got = search_entries(index, query, k, excluded)
        want = oracle_search(index, query, k, excluded)
        assert [i for _, i in got] == [i for _, i in want]
        np.testing.assert_allclose([s for s, _ in got], [s for s, _ in want], atol=1e-12)


def test_search_scores_non_increasing():
    rng = np.random.default_rng(47)
    index = random_index(rng, 100)
    query = unit(rng.normal(size=8))
    result = search(index, query, 10, exclude_session="none")
    scores = [h.score for h in result.hits]
    assert scores == sorted(scores, reverse=True)


def test_search_deduplicates_parent_chunks():
    rng = np.random.default_rng(53)
    index = random_index(rng, 60, unique_chunks=False)
    query = unit(rng.normal(size=8))
    result = search(index, query, 5, exclude_session="none")
    chunk_ids = [h.chunk.chunk_id for h in result.hits]
    assert len(chunk_ids) == len(set(chunk_ids))
    # dedup fills slots from lower ranks: with enough distinct chunks the
    # result still carries k hits
    if len({e.chunk_ref for e in index.entries}) >= 5:
        assert len(result.hits) == 5
    # the surviving hits are the best-scoring representative of each chunk
    ranked = oracle_search(index, query, len(index), "none")
    seen = set()
    expected = []
    for score, i in ranked:
        ref = index.entries[i].chunk_ref
        if ref in seen:
            continue
        seen.add(ref)
        expected.append(ref)
        if len(expected) == 5:
            break
    assert chunk_ids == expected


def test_search_dimension_mismatch(small_index):
    with pytest.raises(EmbeddingError, match="dimension"):
        search_entries(small_index, np.ones(small_index.dim + 1), 3, "x")


def test_corpus_fingerprint_changes_with_content():
    a = separable_corpus(seed=0)
    b = separable_corpus(seed=1)
    assert corpus_fingerprint(a) == corpus_fingerprint(a)
    assert corpus_fingerprint(a) != corpus_fingerprint(b)
