"""Semantic boundary detection, threshold calibration against sparse gold
labels, and session chunking (plus the fixed-window baseline).

Boundary scores live at interior positions only: sim(i) compares the mean
embedding of positions [i-w, i-1] against [i, i+w-1], both windows fully
inside the session, so a boundary at i separates positions i-1 and i.
The threshold is swept over a fixed grid and capped at the median of all
observed scores to guard against collapsed embedding spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .corpus import Corpus, Label, Session, Speaker

# Scores live on a 0.01 grid from 0.30 to 0.99 inclusive.
SWEEP_GRID = np.round(np.arange(30, 100) / 100.0, 2)


class ChunkingError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkingParams:
    window: int = 2
    tau: Optional[float] = None
    min_size: int = 2
    max_size: int = 20

    def __post_init__(self):
        if self.window < 1:
            raise ChunkingError("window must be >= 1")
        if self.min_size > self.max_size:
            raise ChunkingError("min_size must not exceed max_size")


@dataclass(frozen=True)
class Chunk:
    """A contiguous utterance span [start, end] within one session."""

    chunk_id: str
    session_id: str
    start: int
    end: int
    majority_label: Optional[Label]
    text: str

    def __len__(self) -> int:
        return self.end - self.start + 1

    def positions(self) -> range:
        return range(self.start, self.end + 1)


@dataclass(frozen=True)
class CalibrationResult:
    tau: float
    window: int
    f1: float
    median_cap_applied: bool
    median: float
    grid: tuple[float, ...]
    f1_curve: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "w": self.window,
            "f1": self.f1,
            "median_cap_applied": self.median_cap_applied,
            "median": self.median,
            "grid_curve": [
                {"tau": t, "f1": f} for t, f in zip(self.grid, self.f1_curve)
            ],
        }


def render_utterance_line(speaker: Speaker, text: str) -> str:
    return f"[{speaker.value}] {text}"


def render_span_text(session: Session, start: int, end: int) -> str:
    """`[speaker] text` lines, one per utterance, joined by newlines."""
    return "\n".join(
        render_utterance_line(u.speaker, u.text)
        for u in session.utterances[start : end + 1]
    )


def smoothed_similarity(session_vectors: np.ndarray, w: int) -> dict[int, float]:
    """Boundary score map {position -> sim} for one session.

    Sessions shorter than 2w have no position where both windows fit and
    yield an empty map.  Input rows must be unit vectors.
    """
    if w < 1:
        raise ChunkingError("window must be >= 1")
    vectors = np.ascontiguousarray(np.atleast_2d(session_vectors), dtype=np.float64)
    raw = _kernels.window_scores(vectors, int(w))
    return {int(i): float(raw[i]) for i in np.flatnonzero(~np.isnan(raw))}


def build_gold_boundaries(corpus: Corpus, session_ids) -> list[tuple[str, int, bool]]:
    """(session_id, anchor position, is_boundary) triples from consecutive
    labeled utterances.

    The pair is anchored at the second utterance's position; a boundary is
    a label change.  Unlabeled utterances in between are skipped; pairs
    never span sessions.
    """
    triples = []
    for sid in session_ids:
        session = corpus.session(sid)
        prev_label = None
        for utt in session.utterances:
            if utt.gold_label is None:
                continue
            if prev_label is not None:
                triples.append((sid, utt.position, utt.gold_label != prev_label))
            prev_label = utt.gold_label
    return triples


def calibrate_threshold(
    scores_by_session: dict[str, dict[int, float]],
    gold_boundaries: list[tuple[str, int, bool]],
) -> CalibrationResult:
    """Pick the threshold maximizing boundary F1 on the sweep grid, then cap
    it at the median of all observed scores.

    A position is predicted as a boundary when its score is below the
    threshold.  F1 ties break toward the smallest grid value.  Gold pairs
    anchored at positions without a score are dropped.
    """
    sample_scores = []
    sample_gold = []
    for sid, anchor, is_boundary in gold_boundaries:
        score = scores_by_session.get(sid, {}).get(anchor)
        if score is None:
            continue
        sample_scores.append(score)
        sample_gold.append(is_boundary)
    if not any(sample_gold):
        raise ChunkingError("no labeled boundary pairs with scores in the training split")
    if all(sample_gold):
        raise ChunkingError("no labeled non-boundary pairs with scores in the training split")

    scores = np.asarray(sample_scores, dtype=np.float64)
    gold = np.asarray(sample_gold, dtype=np.bool_)
    f1_curve = _kernels.f1_grid(scores, gold, SWEEP_GRID)
    best = int(np.argmax(f1_curve))  # argmax takes the first max: smallest tau
    tau_star = float(SWEEP_GRID[best])

    all_scores = np.asarray(
        [s for per in scores_by_session.values() for s in per.values()], dtype=np.float64
    )
    median = float(np.median(all_scores)) if all_scores.size else tau_star
    capped = median < tau_star
    return CalibrationResult(
        tau=min(tau_star, median),
        window=0,
        f1=float(f1_curve[best]),
        median_cap_applied=capped,
        median=median,
        grid=tuple(float(t) for t in SWEEP_GRID),
        f1_curve=tuple(float(f) for f in f1_curve),
    )


def _make_chunk(session: Session, start: int, end: int) -> Chunk:
    return Chunk(
        chunk_id=f"{session.session_id}:{start}-{end}",
        session_id=session.session_id,
        start=start,
        end=end,
        majority_label=majority_label_for_span(session, start, end),
        text=render_span_text(session, start, end),
    )


def split_chunks(
    session: Session, scores: dict[int, float], params: ChunkingParams
) -> list[Chunk]:
    """Split one session at below-threshold boundary positions.

    A candidate split whose left fragment would be shorter than min_size is
    suppressed (the fragment merges forward); a trailing fragment shorter
    than min_size merges backward; any remaining run longer than max_size
    is force-split at exact max_size multiples, so only a final remainder
    may come out shorter than min_size.
    """
    if params.tau is None:
        raise ChunkingError("split_chunks needs a calibrated tau")
    n = len(session)
    candidates = sorted(i for i, s in scores.items() if s < params.tau)
    starts = [0]
    for i in candidates:
        if i - starts[-1] < params.min_size:
            continue
        starts.append(i)
    if len(starts) > 1 and n - starts[-1] < params.min_size:
        starts.pop()

    chunks = []
    for run_start, run_end in zip(starts, starts[1:] + [n]):
        pos = run_start
        while run_end - pos > params.max_size:
            chunks.append(_make_chunk(session, pos, pos + params.max_size - 1))
            pos += params.max_size
        chunks.append(_make_chunk(session, pos, run_end - 1))
    return chunks


def fixed_window_chunks(session: Session, w: int) -> list[Chunk]:
    """Non-overlapping segments of exactly w utterances; the final remainder
    may be shorter.  No boundary detection."""
    if w < 1:
        raise ChunkingError("fixed window size must be >= 1")
    n = len(session)
    return [
        _make_chunk(session, start, min(start + w, n) - 1) for start in range(0, n, w)
    ]


def majority_label_for_span(session: Session, start: int, end: int) -> Optional[Label]:
    """Most frequent gold label in [start, end]; frequency ties break toward
    the label appearing earliest in the span; None when nothing is labeled."""
    counts: dict[Label, int] = {}
    first_seen: dict[Label, int] = {}
    for utt in session.utterances[start : end + 1]:
        if utt.gold_label is None:
            continue
        counts[utt.gold_label] = counts.get(utt.gold_label, 0) + 1
        first_seen.setdefault(utt.gold_label, utt.position)
    if not counts:
        return None
    return max(counts, key=lambda lab: (counts[lab], -first_seen[lab]))


def majority_label(chunk: Chunk, corpus: Corpus) -> Optional[Label]:
    return majority_label_for_span(corpus.session(chunk.session_id), chunk.start, chunk.end)
