"""Experiment configuration files, validation and run manifests.

Configs are declarative JSON files; the condition matrix (chunking x
retrieval granularity x provider x k) is expressed entirely through config
keys so ablations are sweepable without code changes.  Validation reports
every problem at once rather than stopping at the first.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


CONDITIONS = {
    "no_rag": {"chunking": None, "granularity": None, "default_k": 0},
    "rag_no_finetune": {"chunking": "semantic", "granularity": "chunk", "default_k": 3},
    "rag_finetuned_chunk": {"chunking": "semantic", "granularity": "chunk", "default_k": 3},
    "rag_finetuned_utt": {"chunking": "semantic", "granularity": "utterance", "default_k": 3},
    "rag_fixed_w3": {"chunking": "fixed", "fixed_w": 3, "granularity": "chunk", "default_k": 3},
    "rag_fixed_w5": {"chunking": "fixed", "fixed_w": 5, "granularity": "chunk", "default_k": 3},
}

STANDARD_K = (0, 1, 3, 5)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: str
    format: str
    test_split: str
    condition: str
    k: int
    output_dir: str
    dataset: str = ""
    min_labels: int = 0
    window: int = 2
    tau: Optional[float] = None
    provider: Optional[dict] = None
    client: dict = field(default_factory=dict)
    temperature: float = 1.0
    concurrency: int = 4
    cache_dir: Optional[str] = None
    seed: int = 0
    allow_nonstandard_k: bool = False

    @property
    def chunking(self) -> Optional[str]:
        return CONDITIONS[self.condition]["chunking"]

    @property
    def granularity(self) -> Optional[str]:
        return CONDITIONS[self.condition]["granularity"]

    @property
    def fixed_w(self) -> Optional[int]:
        return CONDITIONS[self.condition].get("fixed_w")

    @property
    def uses_retrieval(self) -> bool:
        return self.condition != "no_rag"

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "format": self.format,
            "test_split": self.test_split,
            "condition": self.condition,
            "k": self.k,
            "output_dir": self.output_dir,
            "dataset": self.dataset,
            "min_labels": self.min_labels,
            "window": self.window,
            "tau": self.tau,
            "provider": self.provider,
            "client": self.client,
            "temperature": self.temperature,
            "concurrency": self.concurrency,
            "cache_dir": self.cache_dir,
            "seed": self.seed,
            "allow_nonstandard_k": self.allow_nonstandard_k,
        }

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def validate_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Load and validate a config file, raising ConfigError with the full
    error list when anything is wrong.  Overrides replace individual keys
    before validation (the flag-beats-file rule)."""
    errors = []
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc.msg}"]) from None
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})

    condition = raw.get("condition")
    condition_known = condition in CONDITIONS
    if not condition_known:
        errors.append(
            f"unknown condition {condition!r} (expected one of {sorted(CONDITIONS)})"
        )

    default_k = CONDITIONS[condition]["default_k"] if condition_known else 3
    k = raw.get("k", default_k)
    if not isinstance(k, int):
        errors.append(f"k must be an integer, got {k!r}")
        k = default_k
    if condition == "no_rag" and k != 0:
        errors.append(f"no_rag runs without retrieval: k must be 0, got {k}")
    allow_nonstandard_k = bool(raw.get("allow_nonstandard_k", False))
    if k not in STANDARD_K and not allow_nonstandard_k:
        errors.append(
            f"k={k} is outside the standard set {STANDARD_K}; "
            "set allow_nonstandard_k to override"
        )

    for key in ("corpus", "test_split", "output_dir"):
        if not raw.get(key):
            errors.append(f"missing required config key: {key!r}")
    for key, label in (("corpus", "corpus file"), ("test_split", "split file")):
        value = raw.get(key)
        if value and not Path(value).exists():
            errors.append(f"{label} not found: {value}")

    fmt = raw.get("format", "jsonl")
    if fmt not in ("jsonl", "csv"):
        errors.append(f"unknown corpus format {fmt!r}")

    provider = raw.get("provider")
    if condition != "no_rag":
        if not provider:
            if condition_known:
                errors.append(f"condition {condition!r} needs a provider config")
        elif provider.get("type") not in ("dump", "http"):
            errors.append(f"unknown provider type {provider.get('type')!r}")
        elif provider["type"] == "dump":
            dump_path = provider.get("path")
            if not dump_path:
                errors.append("dump provider needs a 'path'")
            elif not Path(dump_path).exists():
                errors.append(f"vector dump not found: {dump_path}")
        elif provider["type"] == "http" and not provider.get("url"):
            errors.append("http provider needs a 'url'")

    client = raw.get("client") or {}
    if client.get("type", "mock") not in ("mock", "http"):
        errors.append(f"unknown client type {client.get('type')!r}")
    if client.get("type") == "http" and not client.get("url"):
        errors.append("http client needs a 'url'")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(
        corpus=raw["corpus"],
        format=fmt,
        test_split=raw["test_split"],
        condition=raw["condition"],
        k=k,
        output_dir=raw["output_dir"],
        dataset=raw.get("dataset", ""),
        min_labels=int(raw.get("min_labels", 0)),
        window=int(raw.get("window", 2)),
        tau=raw.get("tau"),
        provider=provider,
        client=client,
        temperature=float(raw.get("temperature", 1.0)),
        concurrency=int(raw.get("concurrency", 4)),
        cache_dir=raw.get("cache_dir"),
        seed=int(raw.get("seed", 0)),
        allow_nonstandard_k=allow_nonstandard_k,
    )


@dataclass
class RunManifest:
    config_hash: str
    corpus_hash: str
    condition: str
    k: int
    tau: Optional[float]
    stage_hashes: dict = field(default_factory=dict)
    created: float = field(default_factory=time.time)
    version: str = "movetag-0.1.0"

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config_hash": self.config_hash,
            "corpus_hash": self.corpus_hash,
            "condition": self.condition,
            "k": self.k,
            "tau": self.tau,
            "stage_hashes": self.stage_hashes,
            "created": self.created,
        }


def stage_input_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()
