"""Uniform access to chat and embedding providers.

Real deployments talk to an OpenAI-compatible endpoint (chat completions and
embeddings); tests and the offline fixtures use deterministic stubs. Every
similarity computation in the package funnels through
:func:`cosine_similarity` so there is exactly one numeric definition.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import EmbeddingError, ProviderRejectionError, TransportError

logger = logging.getLogger(__name__)

ENV_API_BASE = "TPGO_API_BASE"
ENV_API_KEY = "TPGO_API_KEY"

Message = dict[str, str]


def estimate_tokens(text: str) -> int:
    """Cheap deterministic token estimate used when a provider reports none."""
    return max(1, len(text) // 4)


@dataclass(frozen=True)
class ModelConfig:
    """Per-role model settings; temperature/top_p defaults follow the meta-model setup."""

    model_name: str = "stub"
    temperature: float = 0.7
    top_p: float = 0.95
    max_retries: int = 3
    backoff_base: float = 0.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class UsageCounters:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0 or self.wall_time < 0:
            raise ValueError("usage counters must be non-negative")

    def __add__(self, other: "UsageCounters") -> "UsageCounters":
        return UsageCounters(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.wall_time + other.wall_time,
        )

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatExchange:
    request: tuple[Message, ...]
    response: str
    usage: UsageCounters


@dataclass(frozen=True)
class ProviderReply:
    """Raw provider output before retry accounting."""

    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    wall_time: float | None = None


class ChatProvider(Protocol):
    def complete(self, config: ModelConfig, messages: Sequence[Message]) -> ProviderReply: ...


class EmbeddingProvider(Protocol):
    dimension: int

    def embed_raw(self, texts: Sequence[str]) -> list["EmbeddingVector"]: ...


class UsageLedger:
    """Thread-safe accounting sink; keeps the raw call log plus running totals."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[tuple[str, UsageCounters]] = []

    def record(self, role: str, usage: UsageCounters) -> None:
        with self._lock:
            self._entries.append((role, usage))

    @property
    def entries(self) -> list[tuple[str, UsageCounters]]:
        with self._lock:
            return list(self._entries)

    def total(self) -> UsageCounters:
        total = UsageCounters()
        for _, usage in self.entries:
            total = total + usage
        return total

    def total_for(self, role: str) -> UsageCounters:
        total = UsageCounters()
        for r, usage in self.entries:
            if r == role:
                total = total + usage
        return total

    def call_count(self) -> int:
        with self._lock:
            return len(self._entries)


@dataclass(frozen=True)
class EmbeddingVector:
    """Unit-norm embedding; construct through :meth:`of` to normalize."""

    values: np.ndarray

    @classmethod
    def of(cls, raw: Sequence[float] | np.ndarray) -> "EmbeddingVector":
        arr = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not np.isfinite(norm):
            raise EmbeddingError("embedding has zero or non-finite norm")
        unit = arr / norm
        unit.flags.writeable = False
        return cls(unit)

    @classmethod
    def from_unit(cls, raw: Sequence[float] | np.ndarray) -> "EmbeddingVector":
        """Wrap an already-normalized vector bit-exactly (store round-trips)."""
        arr = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-9:
            raise EmbeddingError(f"stored vector is not unit-norm (|v| = {norm})")
        arr = arr.copy()
        arr.flags.writeable = False
        return cls(arr)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def tolist(self) -> list[float]:
        return [float(v) for v in self.values]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash(self.values.tobytes())


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Inner product of two unit vectors; the one similarity definition in the repo."""
    if a.dimension != b.dimension:
        raise ValueError(f"dimension mismatch: {a.dimension} != {b.dimension}")
    return float(np.dot(a.values, b.values))


def _sleep_backoff(config: ModelConfig, attempt: int, sleeper: Callable[[float], None]) -> None:
    if config.backoff_base > 0:
        sleeper(config.backoff_base * (2 ** (attempt - 1)))


def chat(
    provider: ChatProvider,
    config: ModelConfig,
    messages: Sequence[Message],
    *,
    ledger: UsageLedger | None = None,
    role: str = "chat",
    clock: Callable[[], float] = time.perf_counter,
    sleeper: Callable[[float], None] = time.sleep,
) -> ChatExchange:
    """One chat completion with transient-failure retry and usage accounting.

    Up to ``config.max_retries`` retries follow the first attempt, with delay
    ``backoff_base * 2**(attempt-1)`` between attempts (no jitter; a zero base
    disables sleeping for reproducible tests).
    """
    if not messages:
        raise ValueError("messages must be non-empty")
    attempts = 0
    last_error: TransportError | None = None
    while attempts <= config.max_retries:
        attempts += 1
        start = clock()
        try:
            reply = provider.complete(config, messages)
        except TransportError as exc:
            last_error = exc
            logger.debug("chat attempt %d/%d failed: %s", attempts, config.max_retries + 1, exc)
            if attempts <= config.max_retries:
                _sleep_backoff(config, attempts, sleeper)
            continue
        wall = reply.wall_time if reply.wall_time is not None else max(0.0, clock() - start)
        prompt_tokens = reply.prompt_tokens
        if prompt_tokens is None:
            prompt_tokens = estimate_tokens("\n".join(m.get("content", "") for m in messages))
        completion_tokens = reply.completion_tokens
        if completion_tokens is None:
            completion_tokens = estimate_tokens(reply.text)
        usage = UsageCounters(prompt_tokens, completion_tokens, wall)
        if ledger is not None:
            ledger.record(role, usage)
        return ChatExchange(tuple(dict(m) for m in messages), reply.text, usage)
    raise TransportError(f"chat failed after {attempts} attempts: {last_error}", attempts=attempts)


def embed(
    provider: EmbeddingProvider,
    texts: Sequence[str],
    *,
    config: ModelConfig | None = None,
    ledger: UsageLedger | None = None,
    role: str = "embedder",
    sleeper: Callable[[float], None] = time.sleep,
) -> list[EmbeddingVector]:
    """Embed texts in order, with the same retry policy as chat."""
    for text in texts:
        if not text:
            raise ValueError("cannot embed an empty string")
    if not texts:
        return []
    config = config or ModelConfig()
    attempts = 0
    last_error: TransportError | None = None
    while attempts <= config.max_retries:
        attempts += 1
        try:
            vectors = provider.embed_raw(texts)
        except TransportError as exc:
            last_error = exc
            if attempts <= config.max_retries:
                _sleep_backoff(config, attempts, sleeper)
            continue
        if ledger is not None:
            tokens = sum(estimate_tokens(t) for t in texts)
            ledger.record(role, UsageCounters(prompt_tokens=tokens))
        return vectors
    raise TransportError(f"embed failed after {attempts} attempts: {last_error}", attempts=attempts)


# ---------------------------------------------------------------------------
# Deterministic stub embedder: seeded token-hash bag of features.
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashEmbeddingProvider:
    """Offline embedder: hashes tokens into a signed bag-of-features vector.

    A fixed seed makes it a pure function of the input text, so equal strings
    always embed identically and token overlap drives similarity, which is
    enough structure for duplicate filtering and clustering tests.
    """

    def __init__(self, dimension: int = 64, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def _token_slot(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b(
            f"{self.seed}:{token}".encode("utf-8"), digest_size=8
        ).digest()
        bucket = int.from_bytes(digest[:4], "big") % self.dimension
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        return bucket, sign

    def embed_raw(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out = []
        for text in texts:
            vec = np.zeros(self.dimension, dtype=np.float64)
            for token in _TOKEN_RE.findall(text.lower()):
                bucket, sign = self._token_slot(token)
                vec[bucket] += sign
            if not vec.any():
                # Token-free input (e.g. punctuation only): pin a stable slot.
                vec[0] = 1.0
            out.append(EmbeddingVector.of(vec))
        return out


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP providers.
# ---------------------------------------------------------------------------


def _resolve_base(base_url: str | None) -> str:
    base = base_url or os.environ.get(ENV_API_BASE, "")
    if not base:
        raise ProviderRejectionError(f"no API base configured; set {ENV_API_BASE}")
    return base.rstrip("/")


def _auth_headers(api_key: str | None) -> dict[str, str]:
    key = api_key or os.environ.get(ENV_API_KEY, "")
    headers = {"Content-Type": "application/json"}
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


class OpenAICompatibleChat:
    """Chat-completions client for any OpenAI-compatible endpoint."""

    def __init__(self, base_url: str | None = None, api_key: str | None = None, timeout: float = 120.0, session=None):
        self._base = _resolve_base(base_url)
        self._headers = _auth_headers(api_key)
        self._timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def complete(self, config: ModelConfig, messages: Sequence[Message]) -> ProviderReply:
        payload = {
            "model": config.model_name,
            "messages": list(messages),
            "temperature": config.temperature,
            "top_p": config.top_p,
        }
        data = _post_json(self._session, f"{self._base}/chat/completions", payload, self._headers, self._timeout)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderRejectionError(f"malformed chat completion response: {exc}") from exc
        usage = data.get("usage") or {}
        return ProviderReply(
            text=text,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


class OpenAICompatibleEmbeddings:
    """Embeddings client for any OpenAI-compatible endpoint."""

    def __init__(
        self,
        model_name: str,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        session=None,
    ):
        self._model = model_name
        self._base = _resolve_base(base_url)
        self._headers = _auth_headers(api_key)
        self._timeout = timeout
        self.dimension = -1  # learned from the first response
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def embed_raw(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        payload = {"model": self._model, "input": list(texts)}
        data = _post_json(self._session, f"{self._base}/embeddings", payload, self._headers, self._timeout)
        try:
            rows = sorted(data["data"], key=lambda d: d["index"])
            vectors = [EmbeddingVector.of(row["embedding"]) for row in rows]
        except (KeyError, TypeError) as exc:
            raise ProviderRejectionError(f"malformed embeddings response: {exc}") from exc
        if len(vectors) != len(texts):
            raise ProviderRejectionError("embeddings response count does not match input count")
        if vectors:
            self.dimension = vectors[0].dimension
        return vectors


def _post_json(session, url: str, payload: dict, headers: dict[str, str], timeout: float) -> dict:
    import requests

    try:
        response = session.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"request to {url} failed: {exc}") from exc
    if response.status_code >= 500:
        raise TransportError(f"{url} returned {response.status_code}")
    if response.status_code >= 400:
        raise ProviderRejectionError(f"{url} returned {response.status_code}: {response.text[:200]}")
    try:
        return response.json()
    except ValueError as exc:
        raise ProviderRejectionError(f"{url} returned non-JSON body") from exc


def vectors_matrix(vectors: Sequence[EmbeddingVector]) -> np.ndarray:
    """Stack embedding vectors into an (n, dim) float64 matrix."""
    if not vectors:
        return np.zeros((0, 0), dtype=np.float64)
    return np.stack([v.values for v in vectors]).astype(np.float64)
