"""LLM dispatch with response caching, retries, and a replay mode.

Replay mode serves every response from the cache and never touches the
network, which makes batch runs deterministic and offline-testable. Live
responses are appended to the cache so any run can be replayed later.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .corpus import RelationOntology
from .prompting import ParsedPrediction, parse_response

logger = logging.getLogger(__name__)

LLM_API_KEY_ENV = "HYDRE_LLM_API_KEY"
RETRY_BACKOFF_SECONDS = (1.0, 4.0, 16.0)
# fallback when the backend cannot count tokens: whitespace tokens x 1.3
TOKEN_ESTIMATE_FACTOR = 1.3


class PromptTooLong(ValueError):
    def __init__(self, token_count: int, limit: int) -> None:
        super().__init__(
            f"prompt counts {token_count} tokens, over the {limit}-token input limit"
        )
        self.token_count = token_count
        self.limit = limit


class ReplayMiss(LookupError):
    """A prompt has no cached response in replay-only mode (fixture gap)."""

    def __init__(self, detail: str) -> None:
        super().__init__(f"replay cache miss: {detail}")


class TransportError(RuntimeError):
    """The backend could not produce a response."""


class CacheCorruption(RuntimeError):
    """Two different payloads claim the same cache key."""


@dataclass(frozen=True)
class GenerationParams:
    model_name: str = "gpt-4o"
    temperature: float = 0.0
    max_input_tokens: int = 2048
    max_output_tokens: int = 256

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_input_tokens <= 0 or self.max_output_tokens <= 0:
            raise ValueError("token limits must be positive")


def prompt_sha(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def cache_key(prompt: str, params: GenerationParams) -> str:
    payload = b"\x00".join(
        [
            prompt.encode("utf-8"),
            params.model_name.encode("utf-8"),
            repr(float(params.temperature)).encode("ascii"),
            str(params.max_output_tokens).encode("ascii"),
        ]
    )
    return hashlib.sha256(payload).hexdigest()


@dataclass
class ReplayCache:
    """Append-only response cache keyed by (prompt, model, params) hash."""

    path: Path | None = None
    entries: dict[str, str] = field(default_factory=dict)
    _shas: dict[str, str] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def load(cls, path: str | Path) -> "ReplayCache":
        path = Path(path)
        cache = cls(path=path)
        if not path.exists():
            return cache
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                key, sha, response = record["key"], record["prompt_sha"], record["response"]
                if key in cache.entries and (
                    cache.entries[key] != response or cache._shas[key] != sha
                ):
                    raise CacheCorruption(f"{path}:{lineno}: conflicting entry for key {key}")
                cache.entries[key] = response
                cache._shas[key] = sha
        return cache

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def get(self, key: str) -> str:
        return self.entries[key]

    def append(self, key: str, sha: str, response: str) -> None:
        with self._lock:
            if key in self.entries:
                if self.entries[key] != response or self._shas[key] != sha:
                    raise CacheCorruption(f"conflicting entry for key {key}")
                return
            self.entries[key] = response
            self._shas[key] = sha
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {"key": key, "prompt_sha": sha, "response": response},
                            sort_keys=True,
                            ensure_ascii=False,
                        )
                    )
                    fh.write("\n")


class Backend(Protocol):
    def complete(self, prompt: str, params: GenerationParams) -> str: ...


class MockBackend:
    """Test backend returning canned text and counting calls."""

    def __init__(
        self,
        response: str | Callable[[str], str] = "NA",
        token_counter: Callable[[str], int] | None = None,
    ) -> None:
        self.response = response
        self.calls: list[str] = []
        self._token_counter = token_counter
        if token_counter is not None:
            self.count_tokens = token_counter  # type: ignore[assignment]

    def complete(self, prompt: str, params: GenerationParams) -> str:
        self.calls.append(prompt)
        if callable(self.response):
            return self.response(prompt)
        return self.response


class FailOnDispatchBackend:
    """Asserts that no real dispatch happens (replay-only runs)."""

    def complete(self, prompt: str, params: GenerationParams) -> str:
        raise AssertionError("backend dispatch attempted in replay-only mode")


class HttpChatBackend:
    """Chat-completion HTTP backend.

    Posts {"model", "messages", "temperature", "max_tokens"} and reads
    choices[0].message.content. The bearer token comes from the
    HYDRE_LLM_API_KEY environment variable.
    """

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = LLM_API_KEY_ENV,
        session=None,
        timeout: float = 120.0,
    ) -> None:
        if session is None:
            import requests

            session = requests.Session()
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.session = session
        self.timeout = timeout

    def complete(self, prompt: str, params: GenerationParams) -> str:
        headers = {}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": params.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        try:
            response = self.session.post(
                self.endpoint, json=body, headers=headers, timeout=self.timeout
            )
            response.raise_for_status()
            payload = response.json()
            return payload["choices"][0]["message"]["content"]
        except Exception as exc:
            raise TransportError(str(exc)) from exc


def count_input_tokens(prompt: str, backend=None) -> int:
    """Backend-reported token count when available, else a conservative
    whitespace estimate."""
    if backend is not None and hasattr(backend, "count_tokens"):
        return int(backend.count_tokens(prompt))
    return math.ceil(len(prompt.split()) * TOKEN_ESTIMATE_FACTOR)


def generate(
    prompt: str,
    params: GenerationParams,
    backend=None,
    *,
    cache: ReplayCache | None = None,
    mode: str = "live",
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Produce a response for one prompt.

    The cache is consulted first in every mode. Replay mode raises
    ReplayMiss on an uncached prompt instead of dispatching. Live dispatch
    retries transient transport failures with 1s/4s/16s backoff and appends
    successful responses to the cache.
    """
    if not prompt:
        raise ValueError("empty prompt")
    if mode not in ("live", "replay"):
        raise ValueError(f"unknown mode {mode!r}")
    tokens = count_input_tokens(prompt, backend)
    if tokens > params.max_input_tokens:
        raise PromptTooLong(tokens, params.max_input_tokens)
    key = cache_key(prompt, params)
    if cache is not None and key in cache:
        return cache.get(key)
    if mode == "replay":
        raise ReplayMiss(f"key {key} (prompt sha {prompt_sha(prompt)})")
    if backend is None:
        raise ValueError("live mode requires a backend")
    last: Exception | None = None
    for backoff in (None,) + RETRY_BACKOFF_SECONDS:
        if backoff is not None:
            logger.warning("dispatch failed (%s); retrying in %ss", last, backoff)
            sleep(backoff)
        try:
            response = backend.complete(prompt, params)
            break
        except TransportError as exc:
            last = exc
    else:
        raise TransportError(f"dispatch failed after retries: {last}")
    if cache is not None:
        cache.append(key, prompt_sha(prompt), response)
    return response


@dataclass(frozen=True)
class BatchResult:
    query_id: str
    prediction: ParsedPrediction
    response: str | None
    error: str | None = None


def run_batch(
    prompts: Sequence[tuple[str, str]],
    ontology: RelationOntology,
    params: GenerationParams,
    backend=None,
    *,
    cache: ReplayCache | None = None,
    mode: str = "live",
    parallelism: int = 1,
    sleep: Callable[[float], None] = time.sleep,
) -> list[BatchResult]:
    """Generate and parse every (query_id, prompt), preserving input order.

    A query that fails permanently yields an NA prediction carrying the
    error message; the batch itself never aborts.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(item: tuple[str, str]) -> BatchResult:
        query_id, prompt = item
        try:
            response = generate(
                prompt, params, backend, cache=cache, mode=mode, sleep=sleep
            )
        except Exception as exc:
            return BatchResult(
                query_id,
                ParsedPrediction(frozenset(), raw_response=""),
                response=None,
                error=f"{type(exc).__name__}: {exc}",
            )
        return BatchResult(query_id, parse_response(response, ontology), response)

    if parallelism == 1:
        return [one(item) for item in prompts]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, prompts))
