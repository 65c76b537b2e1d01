"""Flat vector indexes over chunks or labeled utterances, dynamic context
windows, query construction and exact top-k search with session exclusion.

An index stores mean-centered, re-unit-normalized vectors plus enough
chunk metadata to resolve parent chunks without the corpus.  Search is an
exact scan (no approximate structures): corpora here are ~10^4 entries,
so the flat kernel is both fast and oracle-equal by construction.

Index file format: one line of compact manifest JSON (granularity, dim,
provider, tau, corpus hash, centering mean, entry and chunk metadata)
followed by the raw little-endian float32 vector block, row-major.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .chunking import Chunk, render_utterance_line
from .corpus import Corpus, Label, Session
from .embedding import (
    EmbeddingCache,
    EmbeddingError,
    fit_centering,
    CenteringTransform,
    embed_cached,
    renormalize_centered,
)

TARGET_MARKER = "<<<TARGET>>>"

# Dynamic windows grow at most this many utterances in each direction.
MAX_CONTEXT_SPAN = 10


class RetrievalError(RuntimeError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    session_id: str
    chunk_ref: str
    utterance_ref: Optional[tuple[str, int]]
    entry_label: Optional[Label]


@dataclass
class VectorIndex:
    granularity: str  # "chunk" | "utterance"
    centering: CenteringTransform
    vectors: np.ndarray  # (n, d) float64, unit rows (zero rows allowed)
    entries: list[IndexEntry]
    chunks: dict[str, Chunk]
    provider_id: str
    manifest: dict

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ContextWindow:
    session_id: str
    target: int
    lo: int
    hi: int
    text: str
    target_speaker: str


@dataclass(frozen=True)
class RetrievalHit:
    score: float
    chunk: Chunk
    entry_label: Optional[Label]


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[RetrievalHit, ...]
    k: int
    excluded_session: str


def corpus_fingerprint(corpus: Corpus) -> str:
    """Stable content hash over sessions, texts and labels."""
    digest = hashlib.sha256()
    for session in corpus.sessions:
        digest.update(session.session_id.encode("utf-8"))
        for utt in session.utterances:
            digest.update(b"\x00")
            digest.update(utt.speaker.value.encode("utf-8"))
            digest.update(b"\x01")
            digest.update(utt.text.encode("utf-8"))
            digest.update(b"\x02")
            digest.update((utt.gold_label.code if utt.gold_label else "").encode())
    return digest.hexdigest()


def build_index(
    chunks: Sequence[Chunk],
    corpus: Corpus,
    provider,
    granularity: str,
    cache: Optional[EmbeddingCache] = None,
    params: Optional[dict] = None,
) -> VectorIndex:
    """Embed chunks (chunk granularity) or every labeled utterance inside
    them (utterance granularity), fit mean-centering on the raw unit
    vectors, then center and re-normalize.

    Utterance-level entries keep a reference to their parent chunk, which
    search resolves back into the demonstration unit.
    """
    if granularity not in ("chunk", "utterance"):
        raise RetrievalError(f"unknown index granularity: {granularity!r}")
    entries: list[IndexEntry] = []
    texts: list[str] = []
    if granularity == "chunk":
        for chunk in chunks:
            entries.append(
                IndexEntry(
                    session_id=chunk.session_id,
                    chunk_ref=chunk.chunk_id,
                    utterance_ref=None,
                    entry_label=chunk.majority_label,
                )
            )
            texts.append(chunk.text)
    else:
        for chunk in chunks:
            session = corpus.session(chunk.session_id)
            for pos in chunk.positions():
                utt = session.utterances[pos]
                if utt.gold_label is None:
                    continue
                entries.append(
                    IndexEntry(
                        session_id=chunk.session_id,
                        chunk_ref=chunk.chunk_id,
                        utterance_ref=(chunk.session_id, pos),
                        entry_label=utt.gold_label,
                    )
                )
                texts.append(utt.text)
    if not entries:
        raise RetrievalError("index build produced no entries")

    raw = embed_cached(provider, texts, cache=cache)
    centering = fit_centering(raw)
    vectors = renormalize_centered(centering.apply(raw))
    # float32 is the storage precision; round-trip now so freshly built and
    # reloaded indexes search identically.
    vectors = vectors.astype(np.float32).astype(np.float64)

    manifest = {
        "granularity": granularity,
        "dim": int(vectors.shape[1]),
        "provider": provider.identity,
        "n_entries": len(entries),
        "corpus_hash": corpus_fingerprint(corpus),
    }
    if params:
        manifest.update(params)
    return VectorIndex(
        granularity=granularity,
        centering=centering,
        vectors=np.ascontiguousarray(vectors),
        entries=entries,
        chunks={c.chunk_id: c for c in chunks},
        provider_id=provider.identity,
        manifest=manifest,
    )


def save_index(index: VectorIndex, path) -> None:
    path = Path(path)
    chunk_meta = [
        {
            "chunk_id": c.chunk_id,
            "session_id": c.session_id,
            "start": c.start,
            "end": c.end,
            "majority_label": c.majority_label.code if c.majority_label else None,
            "text": c.text,
        }
        for c in index.chunks.values()
    ]
    entry_meta = [
        {
            "session_id": e.session_id,
            "chunk_ref": e.chunk_ref,
            "utterance_ref": list(e.utterance_ref) if e.utterance_ref else None,
            "entry_label": e.entry_label.code if e.entry_label else None,
        }
        for e in index.entries
    ]
    header = dict(index.manifest)
    header["centering_mean"] = [float(x) for x in index.centering.mean]
    header["entries"] = entry_meta
    header["chunks"] = chunk_meta
    blob = index.vectors.astype("<f4").tobytes()
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        handle.write(b"\n")
        handle.write(blob)


def load_index(path) -> VectorIndex:
    path = Path(path)
    if not path.exists():
        raise RetrievalError(f"index file not found: {path}")
    with open(path, "rb") as handle:
        header_line = handle.readline()
        blob = handle.read()
    header = json.loads(header_line.decode("utf-8"))
    dim = int(header["dim"])
    n = int(header["n_entries"])
    vectors = np.frombuffer(blob, dtype="<f4")
    if vectors.shape[0] != n * dim:
        raise RetrievalError(
            f"index vector block has {vectors.shape[0]} floats, expected {n * dim}"
        )
    vectors = np.ascontiguousarray(vectors.reshape(n, dim).astype(np.float64))
    chunks = {
        meta["chunk_id"]: Chunk(
            chunk_id=meta["chunk_id"],
            session_id=meta["session_id"],
            start=meta["start"],
            end=meta["end"],
            majority_label=Label[meta["majority_label"]] if meta["majority_label"] else None,
            text=meta["text"],
        )
        for meta in header["chunks"]
    }
    entries = [
        IndexEntry(
            session_id=meta["session_id"],
            chunk_ref=meta["chunk_ref"],
            utterance_ref=tuple(meta["utterance_ref"]) if meta["utterance_ref"] else None,
            entry_label=Label[meta["entry_label"]] if meta["entry_label"] else None,
        )
        for meta in header["entries"]
    ]
    manifest = {
        k: v for k, v in header.items() if k not in ("centering_mean", "entries", "chunks")
    }
    return VectorIndex(
        granularity=header["granularity"],
        centering=CenteringTransform(mean=np.asarray(header["centering_mean"], dtype=np.float64)),
        vectors=vectors,
        entries=entries,
        chunks=chunks,
        provider_id=header["provider"],
        manifest=manifest,
    )


def dynamic_context(
    session: Session,
    target: int,
    scores: dict[int, float],
    tau: Optional[float],
    max_span: int = MAX_CONTEXT_SPAN,
) -> ContextWindow:
    """Expand one utterance at a time around the target, independently in
    each direction, stopping at a below-threshold boundary, the span cap or
    the session edge.

    A boundary at position i separates i-1 from i, so backward growth from
    lo checks the score at lo and forward growth from hi checks hi+1.
    Positions without a score count as non-boundaries; tau=None disables
    boundary stopping entirely (the no-retrieval shape).
    """
    if not 0 <= target < len(session):
        raise RetrievalError(
            f"target {target} outside session {session.session_id!r}"
        )

    def is_boundary(position: int) -> bool:
        if tau is None:
            return False
        score = scores.get(position)
        return score is not None and score < tau

    lo = target
    while lo > 0 and target - lo < max_span and not is_boundary(lo):
        lo -= 1
    hi = target
    while hi < len(session) - 1 and hi - target < max_span and not is_boundary(hi + 1):
        hi += 1

    lines = []
    for pos in range(lo, hi + 1):
        utt = session.utterances[pos]
        line = render_utterance_line(utt.speaker, utt.text)
        if pos == target:
            line = f"{TARGET_MARKER} {line}"
        lines.append(line)
    return ContextWindow(
        session_id=session.session_id,
        target=target,
        lo=lo,
        hi=hi,
        text="\n".join(lines),
        target_speaker=session.utterances[target].speaker.value,
    )


def window_query_text(session: Session, window: ContextWindow) -> str:
    """The window rendered for embedding: speaker-tagged lines, no marker."""
    return "\n".join(
        render_utterance_line(u.speaker, u.text)
        for u in session.utterances[window.lo : window.hi + 1]
    )


def build_query(
    window: ContextWindow,
    session: Session,
    index: VectorIndex,
    provider,
    cache: Optional[EmbeddingCache] = None,
) -> np.ndarray:
    """Embed the query text for the index granularity, then apply the
    index's centering and re-normalize.

    Utterance granularity embeds the bare target text; chunk granularity
    embeds the whole window in the same rendering chunks were indexed with.
    """
    if index.granularity == "utterance":
        text = session.utterances[window.target].text
    else:
        text = window_query_text(session, window)
    raw = embed_cached(provider, [text], cache=cache)[0]
    centered = index.centering.apply(raw)
    unit = renormalize_centered(centered)[0]
    return unit


def search_entries(
    index: VectorIndex, query: np.ndarray, k: int, exclude_session: str
) -> list[tuple[float, int]]:
    """Exact top-k (score, entry index) pairs, skipping the excluded
    session; ties break toward the lower entry index."""
    query = np.ascontiguousarray(np.asarray(query, dtype=np.float64))
    if query.shape[0] != index.dim:
        raise EmbeddingError(
            f"dimension mismatch: query {query.shape[0]}, index {index.dim}"
        )
    if k <= 0:
        return []
    excluded = np.fromiter(
        (e.session_id == exclude_session for e in index.entries),
        count=len(index.entries),
        dtype=np.bool_,
    )
    idx, scores = _kernels.top_k_cosine(index.vectors, query, excluded, int(k))
    return [(float(s), int(i)) for s, i in zip(scores, idx)]


def search(
    index: VectorIndex, query: np.ndarray, k: int, exclude_session: str
) -> RetrievalResult:
    """Top-k parent chunks for a query.

    Utterance-level hits resolve to their parent chunk; when several hits
    share a parent, the chunk appears once and lower-ranked entries fill
    the remaining slots.  k=0 is the no-retrieval condition and returns an
    empty result.
    """
    hits: list[RetrievalHit] = []
    if k > 0:
        seen_chunks: set[str] = set()
        fetch = int(k)
        while True:
            ranked = search_entries(index, query, fetch, exclude_session)
            hits = []
            seen_chunks = set()
            for score, entry_idx in ranked:
                entry = index.entries[entry_idx]
                if entry.chunk_ref in seen_chunks:
                    continue
                seen_chunks.add(entry.chunk_ref)
                hits.append(
                    RetrievalHit(
                        score=score,
                        chunk=index.chunks[entry.chunk_ref],
                        entry_label=entry.entry_label,
                    )
                )
                if len(hits) == k:
                    break
            if len(hits) == k or len(ranked) < fetch:
                break
            fetch = min(fetch * 2, len(index.entries))
    for hit in hits:
        if hit.chunk.session_id == exclude_session:
            raise RetrievalError("leakage: search returned the excluded session")
    return RetrievalResult(hits=tuple(hits), k=k, excluded_session=exclude_session)
