"""Codebook-grounded prompt rendering, chat clients (HTTP and offline
mocks), JSON response parsing and the per-utterance annotation loop.

Prompt rendering is pure: identical inputs produce byte-identical
bundles, pinned by golden-file tests.  Responses are cached on disk keyed
by (model, temperature, prompt, attempt) so reruns replay without any
client calls.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import requests

from .corpus import Corpus, CorpusError, Label, Speaker
from .retrieval import (
    ContextWindow,
    RetrievalResult,
    TARGET_MARKER,
    VectorIndex,
    build_query,
    dynamic_context,
    search,
)

SYSTEM_PROMPT = """You are an expert educational discourse analyst. Your task is to label each teacher utterance with one move from the allowed moves list.

Workflow
1. Read the dialogue carefully.
2. For each teacher utterance, assign exactly ONE Move from the Allowed Moves list.
3. If an utterance could fit multiple moves, choose the one that best represents the communicative function in context.
4. If no Move applies (e.g., the utterance is off-topic, evaluative, unclear, or unrelated to the lesson), do not label it and leave it as None.

Allowed Moves & Definitions
- Keeping Everyone Together -- Teacher prompts students to be active listeners and orienting students to each other.
- Getting Students to Relate to Another's Ideas -- Teacher prompts students to react to what a classmate said.
- Restating -- Teacher repeats all or part of what a student said word for word.
- Pressing for Accuracy -- Teacher prompts students to make a mathematical contribution or use mathematical language.
- Revoicing -- Teacher repeats what a student said but adding on or changing the wording.
- Pressing for Reasoning -- Teacher prompts students to explain, provide evidence, share their thinking behind a decision, or connect ideas or representations.

Rules
- Annotate ONLY the utterance marked with <<<TARGET>>>.
- Consider the surrounding context to understand the utterance's function.
- If example annotations from similar dialogues are provided, use them as reference.
- Respond with ONLY a JSON object: {"label": "<label or null>", "confidence": <0.0-1.0>}
- If no Move applies, use null for label.
- Do not include any other text outside the JSON."""

EXAMPLES_HEADER = "Similar annotated examples from the corpus"
CONTEXT_HEADER = "Current dialogue context"


class AnnotateError(RuntimeError):
    pass


class ClientError(AnnotateError):
    """Transport or endpoint failure from a chat client."""


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    token_estimate: int


@dataclass(frozen=True)
class TraceEntry:
    chunk_id: str
    score: float
    label: Optional[Label]


@dataclass(frozen=True)
class AnnotationResult:
    session_id: str
    position: int
    predicted_label: Optional[Label]
    confidence: float
    raw_response: str
    retrieval: tuple[TraceEntry, ...]
    condition: str
    k: int
    model: str
    valid: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "position": self.position,
            "condition": self.condition,
            "k": self.k,
            "model": self.model,
            "predicted_label": self.predicted_label.code if self.predicted_label else None,
            "confidence": self.confidence,
            "valid": self.valid,
            "note": self.note,
            "retrieval": [
                {
                    "chunk_id": t.chunk_id,
                    "score": t.score,
                    "label": t.label.code if t.label else None,
                }
                for t in self.retrieval
            ],
        }


def render_prompts(
    window: ContextWindow,
    retrieved: Optional[RetrievalResult],
    target_speaker: str,
) -> PromptBundle:
    """Assemble the system and user messages.

    The user message lists retrieved chunks as "Example i (labeled: ...)"
    blocks in rank order (omitted entirely when retrieval is empty), then
    the context window with the target line marked, then the closing
    instruction naming the target speaker.
    """
    marked_lines = [
        line for line in window.text.split("\n") if line.startswith(TARGET_MARKER + " ")
    ]
    if len(marked_lines) != 1:
        raise AnnotateError(
            f"context window must mark exactly one target line, found {len(marked_lines)}"
        )
    if retrieved is not None:
        for hit in retrieved.hits:
            if hit.chunk.session_id == window.session_id:
                raise AnnotateError(
                    "leakage: a retrieved example comes from the target's session"
                )
    parts = []
    if retrieved is not None and retrieved.hits:
        parts.append(EXAMPLES_HEADER)
        parts.append("")
        for rank, hit in enumerate(retrieved.hits, start=1):
            label_name = hit.entry_label.display_name if hit.entry_label else "None"
            parts.append(f"Example {rank} (labeled: {label_name})")
            parts.append(hit.chunk.text)
            parts.append("")
    parts.append(CONTEXT_HEADER)
    parts.append("")
    parts.append(window.text)
    parts.append("")
    parts.append(f"Annotate the utterance marked {TARGET_MARKER} by [{target_speaker}].")
    parts.append("Respond with only the JSON object.")
    user = "\n".join(parts)
    return PromptBundle(
        system=SYSTEM_PROMPT,
        user=user,
        token_estimate=(len(SYSTEM_PROMPT) + len(user)) // 4,
    )


@dataclass
class ParsedResponse:
    label: Optional[Label]
    confidence: float
    valid: bool
    note: str = ""


def _first_json_object(raw: str) -> Optional[dict]:
    decoder = json.JSONDecoder()
    for start in range(len(raw)):
        if raw[start] != "{":
            continue
        try:
            value, _ = decoder.raw_decode(raw[start:])
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    return None


def parse_response(raw: str) -> ParsedResponse:
    """Extract the first JSON object from a model response, tolerating
    surrounding prose and code fences.

    The label may be a code or a display name (case-insensitive) or null;
    confidence is coerced into [0, 1] with a note when clamped.  Anything
    unparseable yields an invalid result instead of raising.
    """
    obj = _first_json_object(raw)
    if obj is None:
        return ParsedResponse(None, 0.0, False, "no JSON object found")
    if "label" not in obj or "confidence" not in obj:
        missing = [key for key in ("label", "confidence") if key not in obj]
        return ParsedResponse(None, 0.0, False, f"missing fields: {', '.join(missing)}")
    raw_label = obj["label"]
    label: Optional[Label] = None
    if raw_label is not None and str(raw_label).strip().lower() not in ("", "null", "none"):
        try:
            label = Label.parse(str(raw_label))
        except CorpusError:
            return ParsedResponse(None, 0.0, False, f"unknown label: {raw_label!r}")
    try:
        confidence = float(obj["confidence"])
    except (TypeError, ValueError):
        return ParsedResponse(None, 0.0, False, f"non-numeric confidence: {obj['confidence']!r}")
    note = ""
    if confidence < 0.0 or confidence > 1.0:
        note = f"confidence {confidence} clamped to [0, 1]"
        confidence = min(max(confidence, 0.0), 1.0)
    return ParsedResponse(label, confidence, True, note)


# ---------------------------------------------------------------------------
# chat clients


@dataclass(frozen=True)
class LLMResponse:
    text: str
    usage: dict = field(default_factory=dict)


class HTTPChatClient:
    """JSON chat-completions client: posts {model, messages, temperature}
    and reads the content of the first choice (or a bare "content" key)."""

    def __init__(self, url: str, model: str, api_key_env: Optional[str] = None,
                 temperature: float = 1.0, timeout: float = 120.0, retries: int = 3):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout = timeout
        self.retries = max(0, int(retries))
        self._session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ClientError(f"API key environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, system: str, user: str) -> LLMResponse:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.temperature,
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                response = self._session.post(
                    self.url, json=payload, headers=self._headers(), timeout=self.timeout
                )
                if response.status_code >= 500:
                    raise ClientError(f"server error {response.status_code}")
                if response.status_code != 200:
                    raise ClientError(
                        f"chat request failed ({response.status_code}): {response.text[:200]}"
                    )
                body = response.json()
                if "choices" in body:
                    text = body["choices"][0]["message"]["content"]
                elif "content" in body:
                    text = body["content"]
                else:
                    raise ClientError("response carries neither 'choices' nor 'content'")
                return LLMResponse(text=text, usage=body.get("usage", {}))
            except (requests.RequestException, ClientError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(min(2.0**attempt * 0.5, 8.0))
        raise ClientError(f"chat request failed after retries: {last_error}")


_EXAMPLE_LABEL_RE = re.compile(r"^Example 1 \(labeled: (.+)\)$", re.MULTILINE)


class MockLLMClient:
    """Deterministic offline client for tests and dry runs.

    Strategies: "echo_top1" answers with the first example's label parsed
    from the prompt (null when no examples); "fixed" always answers with
    fixed_label; "scripted" pops raw responses from a list.
    """

    def __init__(self, strategy: str = "echo_top1", fixed_label: Optional[str] = None,
                 confidence: float = 0.9, script: Optional[Sequence[str]] = None):
        if strategy not in ("echo_top1", "fixed", "scripted"):
            raise AnnotateError(f"unknown mock strategy: {strategy!r}")
        self.strategy = strategy
        self.fixed_label = fixed_label
        self.confidence = confidence
        self.script = list(script or [])
        self.model = f"mock-{strategy}"
        self.temperature = 0.0
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, system: str, user: str) -> LLMResponse:
        with self._lock:
            self.calls += 1
            if self.strategy == "scripted":
                if not self.script:
                    raise ClientError("scripted mock ran out of responses")
                return LLMResponse(text=self.script.pop(0))
        if self.strategy == "fixed":
            label = json.dumps(self.fixed_label)
            return LLMResponse(text=f'{{"label": {label}, "confidence": {self.confidence}}}')
        match = _EXAMPLE_LABEL_RE.search(user)
        if match and match.group(1) != "None":
            label = json.dumps(match.group(1))
            return LLMResponse(text=f'{{"label": {label}, "confidence": {self.confidence}}}')
        return LLMResponse(text=f'{{"label": null, "confidence": {self.confidence}}}')


class ResponseCache:
    """On-disk response store keyed by (model, temperature, prompt, attempt).

    One file per key, written atomically; safe for concurrent readers and
    writers across threads.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, model: str, temperature: float, system: str, user: str, attempt: int) -> Path:
        digest = hashlib.sha256()
        for part in (model, repr(float(temperature)), system, user, str(attempt)):
            digest.update(part.encode("utf-8"))
            digest.update(b"\x00")
        return self.directory / f"{digest.hexdigest()}.json"

    def get(self, model: str, temperature: float, system: str, user: str, attempt: int) -> Optional[str]:
        path = self._path(model, temperature, system, user, attempt)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, model: str, temperature: float, system: str, user: str, attempt: int, response: str) -> None:
        path = self._path(model, temperature, system, user, attempt)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps({"model": model, "temperature": temperature, "response": response}),
            encoding="utf-8",
        )
        os.replace(tmp, path)


PARSE_RETRIES = 2


def annotate_utterance(
    corpus: Corpus,
    session_id: str,
    position: int,
    *,
    condition: str,
    k: int,
    client,
    index: Optional[VectorIndex] = None,
    provider=None,
    scores: Optional[dict[int, float]] = None,
    tau: Optional[float] = None,
    embedding_cache=None,
    response_cache: Optional[ResponseCache] = None,
) -> AnnotationResult:
    """Annotate one tutor utterance: context window, retrieval (when k > 0
    and an index is present), prompt render, client call, parse.

    Parse failures retry the client call up to PARSE_RETRIES times (each
    attempt has its own cache slot); transport failures after the client's
    own retries yield an invalid result with an error note.
    """
    session = corpus.session(session_id)
    target = session.utterances[position]
    if target.speaker is not Speaker.TUTOR:
        raise AnnotateError(f"target ({session_id}, {position}) is not a tutor utterance")
    window = dynamic_context(session, position, scores or {}, tau)

    retrieved: Optional[RetrievalResult] = None
    if k > 0 and index is not None:
        query = build_query(window, session, index, provider, cache=embedding_cache)
        retrieved = search(index, query, k, exclude_session=session_id)
    bundle = render_prompts(window, retrieved, window.target_speaker)
    trace = tuple(
        TraceEntry(chunk_id=h.chunk.chunk_id, score=h.score, label=h.entry_label)
        for h in (retrieved.hits if retrieved else ())
    )

    model = getattr(client, "model", "unknown")
    temperature = getattr(client, "temperature", 1.0)
    raw_text = ""
    parsed = ParsedResponse(None, 0.0, False, "no attempts made")
    for attempt in range(PARSE_RETRIES + 1):
        cached = None
        if response_cache is not None:
            cached = response_cache.get(model, temperature, bundle.system, bundle.user, attempt)
        if cached is not None:
            raw_text = cached
        else:
            try:
                raw_text = client.complete(bundle.system, bundle.user).text
            except ClientError as exc:
                parsed = ParsedResponse(None, 0.0, False, f"transport failure: {exc}")
                break
            if response_cache is not None:
                response_cache.put(model, temperature, bundle.system, bundle.user, attempt, raw_text)
        parsed = parse_response(raw_text)
        if parsed.valid:
            break
    return AnnotationResult(
        session_id=session_id,
        position=position,
        predicted_label=parsed.label,
        confidence=parsed.confidence,
        raw_response=raw_text,
        retrieval=trace,
        condition=condition,
        k=k,
        model=model,
        valid=parsed.valid,
        note=parsed.note,
    )


def annotation_targets(corpus: Corpus, session_ids: Sequence[str]) -> list[tuple[str, int]]:
    """Labeled tutor utterances in the given sessions, in deterministic
    (session order, position) order."""
    targets = []
    for sid in session_ids:
        for utt in corpus.session(sid).utterances:
            if utt.speaker is Speaker.TUTOR and utt.gold_label is not None:
                targets.append((sid, utt.position))
    return targets


def run_condition(
    corpus: Corpus,
    test_session_ids: Sequence[str],
    *,
    condition: str,
    k: int,
    client,
    index: Optional[VectorIndex] = None,
    provider=None,
    scores_by_session: Optional[dict[str, dict[int, float]]] = None,
    tau: Optional[float] = None,
    embedding_cache=None,
    response_cache: Optional[ResponseCache] = None,
    concurrency: int = 4,
    progress=None,
) -> list[AnnotationResult]:
    """Annotate every labeled tutor utterance in the test sessions.

    Targets fan out over a bounded thread pool; results come back in
    deterministic target order regardless of completion order.  Failures
    surface as invalid results, never as dropped targets.
    """
    scores_by_session = scores_by_session or {}
    targets = annotation_targets(corpus, test_session_ids)

    def one(target: tuple[str, int]) -> AnnotationResult:
        sid, pos = target
        return annotate_utterance(
            corpus,
            sid,
            pos,
            condition=condition,
            k=k,
            client=client,
            index=index,
            provider=provider,
            scores=scores_by_session.get(sid),
            tau=tau,
            embedding_cache=embedding_cache,
            response_cache=response_cache,
        )

    if concurrency <= 1:
        results = [one(t) for t in targets]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(one, targets))
    invalid = sum(1 for r in results if not r.valid)
    if progress is not None:
        progress(f"{condition}: {len(results)} targets annotated, {invalid} invalid")
    return results


def write_results_jsonl(results: Sequence[AnnotationResult], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for result in results:
            handle.write(json.dumps(result.to_dict(), ensure_ascii=False) + "\n")


def read_results_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records
