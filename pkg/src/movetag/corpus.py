"""Dialogue corpus model: move labels, utterances, sessions, loading and
train/test splitting.

Corpora are read from JSONL (one utterance object per line) or CSV with a
header row.  Corpus and Split objects are immutable after construction and
safe to share across worker threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional


class CorpusError(ValueError):
    """Raised for unreadable, malformed or inconsistent corpus inputs."""


class Label(Enum):
    """The six tutor move codes with their codebook display names."""

    KET = "Keeping Everyone Together"
    GSR = "Getting Students to Relate to Another's Ideas"
    RES = "Restating"
    ACC = "Pressing for Accuracy"
    REV = "Revoicing"
    REA = "Pressing for Reasoning"

    @property
    def code(self) -> str:
        return self.name

    @property
    def display_name(self) -> str:
        return self.value

    @classmethod
    def parse(cls, raw: str) -> "Label":
        """Map a code ("ACC") or display name ("Pressing for Accuracy"),
        case-insensitively, to a Label.  Anything else is an error."""
        if isinstance(raw, Label):
            return raw
        text = str(raw).strip()
        upper = text.upper()
        if upper in cls.__members__:
            return cls[upper]
        lowered = text.lower()
        for label in cls:
            if label.value.lower() == lowered:
                return label
        raise CorpusError(f"unknown label string: {raw!r}")


class Speaker(Enum):
    TUTOR = "tutor"
    STUDENT = "student"

    @classmethod
    def parse(cls, raw: str) -> "Speaker":
        text = str(raw).strip().lower()
        if text in ("tutor", "teacher"):
            return cls.TUTOR
        if text == "student":
            return cls.STUDENT
        raise CorpusError(f"unknown speaker role: {raw!r}")


@dataclass(frozen=True)
class Utterance:
    session_id: str
    position: int
    speaker: Speaker
    text: str
    gold_label: Optional[Label] = None

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError(
                f"empty utterance text at ({self.session_id}, {self.position})"
            )


@dataclass(frozen=True)
class Session:
    session_id: str
    utterances: tuple[Utterance, ...]
    dataset: str = ""

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError(f"session {self.session_id!r} has no utterances")
        for i, utt in enumerate(self.utterances):
            if utt.position != i:
                raise CorpusError(
                    f"session {self.session_id!r}: positions must be contiguous "
                    f"from 0, found {utt.position} at index {i}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def labeled_count(self) -> int:
        return sum(1 for u in self.utterances if u.gold_label is not None)


@dataclass(frozen=True)
class Corpus:
    sessions: tuple[Session, ...]
    dataset: str = ""
    _by_id: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        by_id = {}
        for session in self.sessions:
            if session.session_id in by_id:
                raise CorpusError(f"duplicate session id {session.session_id!r}")
            by_id[session.session_id] = session
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.sessions)

    def session(self, session_id: str) -> Session:
        try:
            return self._by_id[session_id]
        except KeyError:
            raise CorpusError(f"unknown session id {session_id!r}") from None

    def session_ids(self) -> tuple[str, ...]:
        return tuple(s.session_id for s in self.sessions)

    @property
    def utterance_count(self) -> int:
        return sum(len(s) for s in self.sessions)

    @property
    def labeled_count(self) -> int:
        return sum(s.labeled_count for s in self.sessions)

    def label_counts(self) -> dict[Label, int]:
        counts = {label: 0 for label in Label}
        for session in self.sessions:
            for utt in session.utterances:
                if utt.gold_label is not None:
                    counts[utt.gold_label] += 1
        return counts


@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise CorpusError(f"sessions on both split sides: {sorted(overlap)}")


def _parse_optional_label(raw) -> Optional[Label]:
    if raw is None:
        return None
    if isinstance(raw, str) and not raw.strip():
        return None
    return Label.parse(raw)


def _record_to_fields(record: dict, row: int):
    try:
        session_id = str(record["session_id"])
        speaker = Speaker.parse(record["speaker"])
        text = str(record["text"])
    except KeyError as exc:
        raise CorpusError(f"row {row}: missing field {exc.args[0]!r}") from None
    position = record.get("position")
    if position is not None and str(position).strip() != "":
        try:
            position = int(position)
        except (TypeError, ValueError):
            raise CorpusError(f"row {row}: position {position!r} is not an integer") from None
    else:
        position = None
    label = _parse_optional_label(record.get("label"))
    return session_id, position, speaker, text, label


def _iter_jsonl_records(path: Path):
    with open(path, encoding="utf-8") as handle:
        for row, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"row {row}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusError(f"row {row}: expected a JSON object")
            yield row, record


def _iter_csv_records(path: Path):
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            return
        for row, record in enumerate(reader, start=2):
            yield row, {k: v for k, v in record.items() if v is not None}


def load_corpus(path, fmt: str = "jsonl", dataset: str = "") -> Corpus:
    """Load a corpus file.

    Sessions keep file order; utterances are sorted by position within each
    session.  Records without an explicit position are numbered in file
    order per session (mixing explicit and implicit positions within one
    session is an error).
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    if fmt == "jsonl":
        records = _iter_jsonl_records(path)
    elif fmt == "csv":
        records = _iter_csv_records(path)
    else:
        raise CorpusError(f"unknown corpus format: {fmt!r}")

    per_session: dict[str, list] = {}
    explicit: dict[str, bool] = {}
    for row, record in records:
        session_id, position, speaker, text, label = _record_to_fields(record, row)
        bucket = per_session.setdefault(session_id, [])
        has_position = position is not None
        if session_id in explicit and explicit[session_id] != has_position:
            raise CorpusError(
                f"row {row}: session {session_id!r} mixes explicit and implicit positions"
            )
        explicit[session_id] = has_position
        if position is None:
            position = len(bucket)
        bucket.append((row, position, speaker, text, label))

    if not per_session:
        raise CorpusError(f"no sessions in corpus file: {path}")

    sessions = []
    for session_id, rows in per_session.items():
        seen: dict[int, int] = {}
        for row, position, *_ in rows:
            if position in seen:
                raise CorpusError(
                    f"row {row}: duplicate (session, position) "
                    f"({session_id!r}, {position}); first seen at row {seen[position]}"
                )
            seen[position] = row
        rows.sort(key=lambda item: item[1])
        utterances = []
        for row, position, speaker, text, label in rows:
            if position != len(utterances):
                raise CorpusError(
                    f"session {session_id!r}: positions are not contiguous from 0 "
                    f"(gap before position {position}, row {row})"
                )
            try:
                utterances.append(
                    Utterance(session_id, position, speaker, text, gold_label=label)
                )
            except CorpusError as exc:
                raise CorpusError(f"row {row}: {exc}") from None
        sessions.append(Session(session_id, tuple(utterances), dataset=dataset))
    return Corpus(tuple(sessions), dataset=dataset)


def save_corpus(corpus: Corpus, path) -> None:
    """Write a corpus as canonical JSONL (one utterance per line)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        for session in corpus.sessions:
            for utt in session.utterances:
                record = {
                    "session_id": utt.session_id,
                    "position": utt.position,
                    "speaker": utt.speaker.value,
                    "text": utt.text,
                }
                if utt.gold_label is not None:
                    record["label"] = utt.gold_label.code
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def filter_min_labels(corpus: Corpus, min_labels: int) -> Corpus:
    """Drop sessions with fewer than min_labels gold-labeled utterances."""
    if min_labels < 0:
        raise CorpusError("min_labels must be >= 0")
    kept = tuple(s for s in corpus.sessions if s.labeled_count >= min_labels)
    return Corpus(kept, dataset=corpus.dataset)


def split_sessions(corpus: Corpus, test_session_ids: Iterable[str]) -> Split:
    """Partition the corpus into train and test session id tuples."""
    test_set = set(test_session_ids)
    unknown = test_set - set(corpus.session_ids())
    if unknown:
        raise CorpusError(f"unknown session ids in split: {sorted(unknown)}")
    train = tuple(sid for sid in corpus.session_ids() if sid not in test_set)
    test = tuple(sid for sid in corpus.session_ids() if sid in test_set)
    return Split(train, test)


def load_split_file(path) -> tuple[str, ...]:
    """Read a newline-delimited session id file."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"split file not found: {path}")
    ids = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            ids.append(line)
    return tuple(ids)


def corpus_stats(corpus: Corpus) -> dict:
    """Dataset-statistics summary used by the `corpus stats` subcommand."""
    n_utt = corpus.utterance_count
    labeled = corpus.labeled_count
    return {
        "dataset": corpus.dataset,
        "sessions": len(corpus),
        "utterances": n_utt,
        "avg_utterances_per_session": round(n_utt / len(corpus), 1) if len(corpus) else 0.0,
        "labeled": labeled,
        "labeled_pct": round(100.0 * labeled / n_utt, 1) if n_utt else 0.0,
        "label_counts": {label.code: n for label, n in corpus.label_counts().items()},
    }
