"""Gateway to completion and embedding providers.

A completion request travels through one client that adds content-addressed
caching, exponential-backoff retries for transient failures, and an optional
in-flight throttle. The transport underneath can be a live HTTP endpoint, a
recorded replay store (for bit-deterministic offline runs), or a scripted
test double.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np

from .model import PromptKind

logger = logging.getLogger(__name__)

__all__ = [
    "BackendError",
    "TransientBackendError",
    "BackendProtocolError",
    "RetryExhaustedError",
    "ReplayMissError",
    "ReplayStoreError",
    "CompletionParams",
    "CompletionRequest",
    "RetryPolicy",
    "default_params",
    "cache_key",
    "Transport",
    "ScriptedTransport",
    "HTTPTransport",
    "ReplayStore",
    "ReplayTransport",
    "RecordingTransport",
    "record_replay_store",
    "CompletionClient",
    "EmbeddingGateway",
    "HashEmbedder",
]

API_KEY_ENV = "MEDSUM_API_KEY"


class BackendError(Exception):
    """Base class for completion/embedding gateway failures."""


class TransientBackendError(BackendError):
    """Rate-limit or 5xx-class failure; the client will retry these."""


class BackendProtocolError(BackendError):
    """Non-transient protocol failure; retrying will not help."""


class RetryExhaustedError(BackendError):
    """All retry attempts failed with transient errors."""

    def __init__(self, attempts: int, last_error: Exception):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"gave up after {attempts} attempts: {last_error}")


class ReplayMissError(BackendError):
    """Strict replay had no stored response for the request's cache key."""

    def __init__(self, key: str):
        self.key = key
        super().__init__(f"replay store has no response for key {key}")


class ReplayStoreError(BackendError):
    """The replay store file is missing or corrupt."""


@dataclass(frozen=True)
class CompletionParams:
    """Sampling parameters attached to one completion request."""

    temperature: float
    max_tokens: int
    top_p: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")

    def as_dict(self) -> dict[str, Any]:
        return {
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "top_p": self.top_p,
        }


# Request defaults per prompt kind. The extraction and resolver prompts run
# near-greedy; summarization sees highly variable inputs and gets a higher
# temperature; both metric prompts run at 0 for reproducible scoring.
DEFAULT_COMPLETION_PARAMS: dict[PromptKind, CompletionParams] = {
    PromptKind.RFE_EXTRACTION: CompletionParams(0.1, 200, 1.0),
    PromptKind.DIALOGUE_EXTRACTION: CompletionParams(0.1, 200, 1.0),
    PromptKind.UNKNOWN_RESOLVER: CompletionParams(0.1, 200, 1.0),
    PromptKind.SUMMARIZATION: CompletionParams(0.7, 512, 1.0),
    PromptKind.METRIC_EXTRACTION: CompletionParams(0.0, 200, 1.0),
    PromptKind.METRIC_VERIFICATION: CompletionParams(0.0, 200, 1.0),
}


def default_params(kind: PromptKind | str) -> CompletionParams:
    """Default sampling parameters for a prompt kind."""
    return DEFAULT_COMPLETION_PARAMS[PromptKind(kind)]


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    params: CompletionParams
    prompt_kind: PromptKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_kind", PromptKind(self.prompt_kind))
        if not self.prompt:
            raise ValueError("prompt is empty")

    @classmethod
    def build(
        cls,
        kind: PromptKind | str,
        prompt: str,
        params: CompletionParams | None = None,
    ) -> "CompletionRequest":
        kind = PromptKind(kind)
        return cls(prompt=prompt, params=params or default_params(kind), prompt_kind=kind)


def cache_key(req: CompletionRequest) -> str:
    """Content hash over (prompt_kind, prompt, params); stable across runs."""
    payload = json.dumps(
        {
            "prompt_kind": req.prompt_kind.value,
            "prompt": req.prompt,
            "params": req.params.as_dict(),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: the n-th retry (1-based) waits
    base_delay * multiplier**(n-1), scaled by a uniform +/- jitter fraction.
    """

    base_delay: float = 1.0
    multiplier: float = 2.0
    max_attempts: int = 6
    jitter_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.base_delay < 0:
            raise ValueError("base_delay must be >= 0")
        if self.multiplier <= 1.0:
            raise ValueError("multiplier must be > 1")
        if self.max_attempts <= 0:
            raise ValueError("max_attempts must be positive")
        if not 0.0 <= self.jitter_fraction < 1.0:
            raise ValueError("jitter_fraction outside [0, 1)")

    def delay(self, retry_index: int, rng: random.Random | None = None) -> float:
        """Delay before the retry with 0-based index `retry_index`."""
        delay = self.base_delay * self.multiplier**retry_index
        if self.jitter_fraction and rng is not None:
            delay *= 1.0 + rng.uniform(-self.jitter_fraction, self.jitter_fraction)
        return delay


class Transport(Protocol):
    """Raw completion call, no retry or caching."""

    def send(self, req: CompletionRequest) -> str: ...


class ScriptedTransport:
    """Test/demo transport driven by a plain function of the request.

    The function may raise TransientBackendError to simulate flaky calls.
    Every request handled is recorded on `.requests`.
    """

    def __init__(self, respond: Callable[[CompletionRequest], str]):
        self._respond = respond
        self.requests: list[CompletionRequest] = []

    def send(self, req: CompletionRequest) -> str:
        self.requests.append(req)
        return self._respond(req)


class HTTPTransport:
    """Completion-style HTTP JSON endpoint.

    Posts {model, prompt, temperature, max_tokens, top_p} and reads
    choices[0].text from the response, the wire shape of widely deployed
    completion servers. The API key comes from the MEDSUM_API_KEY
    environment variable.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "completion-model",
        timeout: float = 120.0,
        session: Any | None = None,
    ):
        import requests

        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self._session = session or requests.Session()

    def send(self, req: CompletionRequest) -> str:
        import os

        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.model,
            "prompt": req.prompt,
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
            "top_p": req.params.top_p,
        }
        try:
            resp = self._session.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"malformed completion response: {exc}") from exc


class ReplayStore:
    """Persistent map from cache key to completion text.

    File format: one JSON object per line with keys key_hex, prompt_kind,
    response_text. On load, a later line for the same key wins. Appends are
    serialized through a lock, so a store may back concurrent recording.
    """

    def __init__(self, path: str | Path, create: bool = False):
        self.path = Path(path)
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()
        elif create:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()
        else:
            raise ReplayStoreError(f"replay store not found: {self.path}")

    def _load(self) -> None:
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    item = json.loads(line)
                    key = item["key_hex"]
                    text = item["response_text"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise ReplayStoreError(
                        f"{self.path}: corrupt entry at line {lineno}: {exc}"
                    ) from exc
                self._entries[key] = text

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def put(self, key: str, prompt_kind: PromptKind | str, response_text: str) -> None:
        with self._lock:
            if self._entries.get(key) == response_text:
                return
            self._entries[key] = response_text
            line = json.dumps(
                {
                    "key_hex": key,
                    "prompt_kind": PromptKind(prompt_kind).value,
                    "response_text": response_text,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self._entries)


class ReplayTransport:
    """Strict replay: serve stored responses, error on any miss."""

    def __init__(self, store: ReplayStore):
        self.store = store

    def send(self, req: CompletionRequest) -> str:
        text = self.store.get(cache_key(req))
        if text is None:
            raise ReplayMissError(cache_key(req))
        return text


class RecordingTransport:
    """Record-through transport: serve from the store when possible,
    otherwise delegate to the inner transport and persist the response.
    """

    def __init__(self, inner: Transport, store: ReplayStore):
        self.inner = inner
        self.store = store

    def send(self, req: CompletionRequest) -> str:
        key = cache_key(req)
        stored = self.store.get(key)
        if stored is not None:
            return stored
        text = self.inner.send(req)
        self.store.put(key, req.prompt_kind, text)
        return text


def record_replay_store(
    path: str | Path, mode: str, live: Transport | None = None
) -> Transport:
    """Open a replay store as a transport.

    mode="replay" serves stored responses byte-identically and errors on a
    miss; mode="record" needs a live transport to delegate misses to and
    persists every new response (the file is created if absent).
    """
    if mode == "replay":
        return ReplayTransport(ReplayStore(path, create=False))
    if mode == "record":
        if live is None:
            raise ValueError("record mode needs a live transport")
        return RecordingTransport(live, ReplayStore(path, create=True))
    raise ValueError(f"unknown replay mode: {mode!r}")


class CompletionClient:
    """Caching, retrying front door for completion calls.

    Safe under arbitrary concurrent callers. The cache is content-addressed
    over (prompt_kind, prompt, params) and stores raw completion text, so
    parser changes never invalidate it. Identical keys are idempotent
    writes; last writer wins. `max_in_flight` bounds concurrent transport
    calls when set.
    """

    def __init__(
        self,
        transport: Transport,
        retry_policy: RetryPolicy | None = None,
        sleeper: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        max_in_flight: int | None = None,
    ):
        self._transport = transport
        self._policy = retry_policy or RetryPolicy()
        self._sleep = sleeper
        self._rng = rng if rng is not None else random.Random()
        self._cache: dict[str, str] = {}
        self._cache_lock = threading.Lock()
        self._gate = (
            threading.BoundedSemaphore(max_in_flight) if max_in_flight else None
        )

    def complete(self, req: CompletionRequest) -> str:
        key = cache_key(req)
        with self._cache_lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached

        text: str | None = None
        for attempt in range(1, self._policy.max_attempts + 1):
            try:
                text = self._send(req)
                break
            except TransientBackendError as exc:
                if attempt == self._policy.max_attempts:
                    raise RetryExhaustedError(attempt, exc) from exc
                delay = self._policy.delay(attempt - 1, self._rng)
                logger.debug(
                    "transient failure on attempt %d (%s); retrying in %.3fs",
                    attempt,
                    exc,
                    delay,
                )
                self._sleep(delay)
        assert text is not None

        with self._cache_lock:
            self._cache[key] = text
        return text

    def _send(self, req: CompletionRequest) -> str:
        if self._gate is None:
            return self._transport.send(req)
        with self._gate:
            return self._transport.send(req)


class EmbeddingGateway(Protocol):
    """Maps text to a fixed-dimension vector."""

    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic embedding double for tests and offline runs.

    Seeds a PCG64 generator from the SHA-256 of the text and draws a unit
    Gaussian vector, so identical texts embed identically on every platform.
    """

    def __init__(self, dimension: int = 32):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        rng = np.random.Generator(np.random.PCG64(seed))
        vector = rng.standard_normal(self.dimension)
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:  # unreachable in practice, but keep the unit-norm contract
            vector[0] = 1.0
            norm = 1.0
        return vector / norm
