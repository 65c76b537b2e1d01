"""Shared fixtures: deterministic offline embedding provider, synthetic
corpora, and the acceptance-criterion reporting hook."""

from __future__ import annotations

import hashlib

import numpy as np
import pytest

from movetag.corpus import Corpus, Label, Session, Speaker, Utterance

LABELS = list(Label)


def unit(v):
    return np.asarray(v, dtype=np.float64) / np.linalg.norm(v)


class SyntheticProvider:
    """Deterministic offline embedding provider.

    The first word of a text selects the vector: the six label codes map to
    six orthogonal basis vectors, so any two texts leading with the same
    code embed identically; every other text hashes to a stable random
    unit vector.
    """

    def __init__(self, dim: int = 8, identity: str = "synthetic-v1"):
        assert dim >= len(LABELS)
        self.dim = dim
        self.identity = identity
        basis = np.eye(dim)
        self._label_vectors = {label.code: basis[i] for i, label in enumerate(LABELS)}

    def _vector(self, text: str) -> np.ndarray:
        words = text.split()
        head = words[0] if words else ""
        if head in self._label_vectors:
            return self._label_vectors[head]
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")
        rng = np.random.default_rng(seed)
        return unit(rng.normal(size=self.dim))

    def embed_batch(self, texts):
        return np.stack([self._vector(t) for t in texts])


class CountingProvider:
    """Wraps a provider and counts embed_batch calls and texts."""

    def __init__(self, inner):
        self.inner = inner
        self.identity = inner.identity
        self.dim = inner.dim
        self.calls = 0
        self.texts_embedded = 0

    def embed_batch(self, texts):
        self.calls += 1
        self.texts_embedded += len(texts)
        return self.inner.embed_batch(texts)


def make_session(sid: str, specs, dataset: str = "") -> Session:
    """specs: iterable of (speaker, text, gold_label_or_None)."""
    utterances = tuple(
        Utterance(sid, i, speaker, text, gold_label=label)
        for i, (speaker, text, label) in enumerate(specs)
    )
    return Session(sid, utterances, dataset=dataset)


def separable_corpus(n_sessions: int = 6, per_session: int = 12, seed: int = 0) -> Corpus:
    """Corpus whose labeled tutor texts lead with their gold label code, so
    the synthetic provider embeds same-label utterances identically.

    Labels cycle deterministically (offset by the seed), so every session
    longer than 12 utterances carries every label.
    """
    sessions = []
    counter = seed
    for s in range(n_sessions):
        sid = f"s{s}"
        specs = []
        for i in range(per_session):
            if i % 2 == 0:
                label = LABELS[counter % len(LABELS)]
                counter += 1
                specs.append(
                    (Speaker.TUTOR, f"{label.code} tutor utterance {sid}-{i}", label)
                )
            else:
                specs.append((Speaker.STUDENT, f"student reply {sid}-{i}", None))
        sessions.append(make_session(sid, specs))
    return Corpus(tuple(sessions))


def runs_corpus(n_sessions: int = 6, runs_per_session: int = 3, run_len: int = 3) -> Corpus:
    """Corpus whose gold labels form contiguous runs, so consecutive labeled
    pairs carry both boundaries (between runs) and non-boundaries (inside
    runs); students sit between tutor turns.  Texts lead with the label
    code for the synthetic provider."""
    sessions = []
    cursor = 0
    for s in range(n_sessions):
        sid = f"s{s}"
        specs = []
        for r in range(runs_per_session):
            label = LABELS[cursor % len(LABELS)]
            cursor += 1
            for j in range(run_len):
                specs.append(
                    (Speaker.TUTOR, f"{label.code} run utterance {sid}-{r}-{j}", label)
                )
                specs.append((Speaker.STUDENT, f"student filler {sid}-{r}-{j}", None))
        sessions.append(make_session(sid, specs))
    return Corpus(tuple(sessions))


@pytest.fixture
def provider():
    return SyntheticProvider()


@pytest.fixture
def corpus():
    return separable_corpus()


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion at the end


_ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        marker = item.get_closest_marker("acceptance")
        if marker:
            name = marker.kwargs.get("name", item.name)
            _ACCEPTANCE_RESULTS.append((name, report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")
