"""Embedding vectors, providers, the mean-centering transform and the
on-disk embedding cache.

Vectors are plain 1-D float64 numpy arrays.  Providers expose an identity
string, a dimension and ``embed_batch``; two ship in-tree: an HTTP JSON
client for hosted embedding endpoints and a file-backed provider that
serves exact-match lookups from a vector-dump file.

Vector-dump format (shared with the fine-tuning exporter): a UTF-8 text
file whose first line is ``dim=<d> provider=<id>`` followed by one record
per line, ``<sha256 hex of the text> <base64 of d little-endian float32
values>``.  Records are unit-normalized vectors.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import requests


class EmbeddingError(RuntimeError):
    """Vector math contract violations (zero norm, dimension mismatch)."""


class ProviderError(RuntimeError):
    """Provider transport or contract failures."""


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale v to unit L2 norm; near-zero vectors are an error."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        raise EmbeddingError("cannot normalize a near-zero vector")
    return v / norm


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped into [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise EmbeddingError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


@dataclass(frozen=True)
class CenteringTransform:
    """Subtracts a fixed mean vector; fitted on stored vectors and applied
    identically to queries."""

    mean: np.ndarray

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.mean.shape[0]:
            raise EmbeddingError(
                f"dimension mismatch: {v.shape[-1]} vs {self.mean.shape[0]}"
            )
        return v - self.mean


def fit_centering(vectors: np.ndarray) -> CenteringTransform:
    """Component-wise mean of a (n, d) stack of vectors."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[0] < 1 or vectors.size == 0:
        raise EmbeddingError("fit_centering needs at least one vector")
    return CenteringTransform(mean=vectors.mean(axis=0))


def apply_centering(transform: CenteringTransform, v: np.ndarray) -> np.ndarray:
    """v minus the fitted mean; not re-normalized."""
    return transform.apply(v)


def renormalize_centered(matrix: np.ndarray) -> np.ndarray:
    """Unit-normalize rows of a centered matrix.

    Rows that centered to numerically zero stay zero (they score 0 against
    every query) instead of raising, so degenerate single-entry indexes
    remain usable.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 1e-12, norms, 1.0)
    return np.where(norms > 1e-12, matrix / safe, 0.0)


# ---------------------------------------------------------------------------
# vector-dump file format


def write_vector_dump(path, provider_id: str, records: dict[str, np.ndarray], dim: int) -> None:
    """Write {sha256(text) -> vector} records in dump format (atomically)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(f"dim={dim} provider={provider_id}\n")
        for digest, vector in records.items():
            handle.write(f"{digest} {encode_dump_vector(vector)}\n")
    os.replace(tmp, path)


def encode_dump_vector(vector: np.ndarray) -> str:
    data = np.asarray(vector, dtype="<f4").tobytes()
    return base64.b64encode(data).decode("ascii")


def decode_dump_vector(payload: str, dim: int) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    vector = np.frombuffer(raw, dtype="<f4")
    if vector.shape[0] != dim:
        raise ProviderError(f"dump record has {vector.shape[0]} values, expected {dim}")
    return vector.astype(np.float64)


def read_vector_dump(path) -> tuple[int, str, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ProviderError(f"vector dump not found: {path}")
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
        parts = dict(
            item.split("=", 1) for item in header.split(" ", 1) if "=" in item
        )
        if "dim" not in parts:
            raise ProviderError(f"malformed dump header: {header!r}")
        dim = int(parts["dim"])
        provider_id = header.split("provider=", 1)[1] if "provider=" in header else ""
        records: dict[str, np.ndarray] = {}
        for line in handle:
            line = line.strip()
            if not line:
                continue
            digest, payload = line.split(" ", 1)
            records[digest] = decode_dump_vector(payload, dim)
    return dim, provider_id, records


class DumpFileProvider:
    """Serves embeddings by exact text-hash lookup in a vector-dump file."""

    def __init__(self, path):
        self.path = Path(path)
        self.dim, self.identity, self._records = read_vector_dump(self.path)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = text_sha256(text)
            if digest not in self._records:
                raise ProviderError(
                    f"text not present in vector dump {self.path}: {text[:60]!r}"
                )
            out[i] = self._records[digest]
        return out


class HTTPEmbeddingProvider:
    """JSON client for a hosted embedding endpoint.

    Sends ``{"model": ..., "input": [texts]}`` and accepts either the
    common ``{"data": [{"embedding": [...]}, ...]}`` response shape or a
    bare ``{"embeddings": [[...], ...]}``.  The API key is read from the
    named environment variable and sent as a bearer token.
    """

    def __init__(self, url: str, model: str, api_key_env: Optional[str] = None,
                 batch_size: int = 64, retries: int = 3, timeout: float = 60.0,
                 dim: Optional[int] = None):
        self.url = url
        self.identity = model
        self.api_key_env = api_key_env
        self.batch_size = max(1, int(batch_size))
        self.retries = max(0, int(retries))
        self.timeout = timeout
        self.dim = dim
        self._session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ProviderError(
                    f"API key environment variable {self.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, texts: Sequence[str]) -> list:
        payload = {"model": self.identity, "input": list(texts)}
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                response = self._session.post(
                    self.url, json=payload, headers=self._headers(), timeout=self.timeout
                )
                if response.status_code >= 500:
                    raise ProviderError(f"server error {response.status_code}")
                if response.status_code != 200:
                    raise ProviderError(
                        f"embedding request failed ({response.status_code}): "
                        f"{response.text[:200]}"
                    )
                body = response.json()
                if "data" in body:
                    return [item["embedding"] for item in body["data"]]
                if "embeddings" in body:
                    return body["embeddings"]
                raise ProviderError("response carries neither 'data' nor 'embeddings'")
            except (requests.RequestException, ProviderError, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(min(2.0**attempt * 0.5, 8.0))
        raise ProviderError(f"embedding request failed after retries: {last_error}")

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        rows: list = []
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start : start + self.batch_size]
            vectors = self._post(chunk)
            if len(vectors) != len(chunk):
                raise ProviderError(
                    f"provider returned {len(vectors)} vectors for {len(chunk)} texts"
                )
            rows.extend(vectors)
        matrix = np.asarray(rows, dtype=np.float64)
        if self.dim is None:
            self.dim = int(matrix.shape[1]) if matrix.size else None
        elif matrix.size and matrix.shape[1] != self.dim:
            raise ProviderError(
                f"dimension drift: provider returned {matrix.shape[1]}, expected {self.dim}"
            )
        return matrix


class EmbeddingCache:
    """Append-only on-disk cache, one dump file per provider identity.

    Content-addressed by (provider identity, sha256 of text); no eviction.
    Writes are serialized; reads are lock-free after load.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._loaded: dict[str, dict[str, np.ndarray]] = {}
        self._lock = threading.Lock()

    def _cache_path(self, identity: str) -> Path:
        stem = hashlib.sha256(identity.encode("utf-8")).hexdigest()[:16]
        return self.directory / f"{stem}.vecs"

    def _records(self, identity: str) -> dict[str, np.ndarray]:
        if identity not in self._loaded:
            path = self._cache_path(identity)
            if path.exists():
                _, _, records = read_vector_dump(path)
                self._loaded[identity] = records
            else:
                self._loaded[identity] = {}
        return self._loaded[identity]

    def lookup(self, identity: str, digest: str) -> Optional[np.ndarray]:
        return self._records(identity).get(digest)

    def store(self, identity: str, dim: int, new_records: dict[str, np.ndarray]) -> None:
        if not new_records:
            return
        with self._lock:
            path = self._cache_path(identity)
            fresh = not path.exists()
            with open(path, "a", encoding="utf-8") as handle:
                if fresh:
                    handle.write(f"dim={dim} provider={identity}\n")
                for digest, vector in new_records.items():
                    handle.write(f"{digest} {encode_dump_vector(vector)}\n")
            self._records(identity).update(new_records)


def embed_cached(provider, texts: Sequence[str], cache: Optional[EmbeddingCache] = None) -> np.ndarray:
    """Unit-normalized provider embeddings, served from cache when possible.

    Cache keys are (provider identity, sha256 of text).  Provider outputs
    are normalized and rounded to float32 (the dump precision) before use,
    so fresh and cache-served vectors are bit-identical and downstream
    artifacts do not depend on cache state.
    """
    if not texts:
        raise ProviderError("embed_cached needs at least one text")
    digests = [text_sha256(t) for t in texts]
    resolved: dict[int, np.ndarray] = {}
    missing: list[int] = []
    if cache is not None:
        for i, digest in enumerate(digests):
            hit = cache.lookup(provider.identity, digest)
            if hit is not None:
                resolved[i] = hit
            else:
                missing.append(i)
    else:
        missing = list(range(len(texts)))

    if missing:
        raw = provider.embed_batch([texts[i] for i in missing])
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        if raw.shape[0] != len(missing):
            raise ProviderError(
                f"provider returned {raw.shape[0]} vectors for {len(missing)} texts"
            )
        fresh: dict[str, np.ndarray] = {}
        for row, i in enumerate(missing):
            unit = normalize(raw[row]).astype(np.float32).astype(np.float64)
            resolved[i] = unit
            fresh[digests[i]] = unit
        if cache is not None:
            cache.store(provider.identity, raw.shape[1], fresh)

    dim = resolved[0].shape[0]
    out = np.empty((len(texts), dim), dtype=np.float64)
    for i in range(len(texts)):
        if resolved[i].shape[0] != dim:
            raise ProviderError("dimension drift across cached and fresh vectors")
        out[i] = resolved[i]
    return out
