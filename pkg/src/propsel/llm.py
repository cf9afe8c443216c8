"""Chat-completion backends: an OpenAI-compatible HTTP client and deterministic mocks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import httpx

from .core import PropselError

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class LLMError(PropselError):
    tag = "BackendFailure"


class RequestTimeout(LLMError):
    pass


class RateLimited(LLMError):
    pass


class BadRequest(LLMError):
    pass


class ServerError(LLMError):
    pass


class MalformedResponse(LLMError):
    pass


class ScriptExhausted(LLMError):
    pass


class UnknownKey(LLMError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 4096

    def __post_init__(self) -> None:
        if not isinstance(self.messages, tuple):
            object.__setattr__(self, "messages", tuple(self.messages))

    def validate(self) -> None:
        if not self.messages:
            raise BadRequest("messages must not be empty")
        for msg in self.messages:
            if msg.get("role") not in ROLES:
                raise BadRequest(f"invalid role {msg.get('role')!r}")
            if not isinstance(msg.get("content"), str):
                raise BadRequest("message content must be a string")
        if self.messages[-1]["role"] != "user":
            raise BadRequest("last message must have role 'user'")
        if self.temperature < 0:
            raise BadRequest(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise BadRequest(f"max_tokens must be positive, got {self.max_tokens}")

    def payload(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [dict(m) for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    retries: int = 0


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


class Backend(Protocol):
    model: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def request_digest(model: str, messages: Sequence[Mapping[str, str]]) -> str:
    """Stable key for a request, used by keyed mocks."""
    blob = json.dumps(
        {"model": model, "messages": [{"role": m["role"], "content": m["content"]} for m in messages]},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def backoff_delay(attempt: int, rng: random.Random, base: float = 1.0, factor: float = 2.0) -> float:
    """Full-jitter exponential backoff for retry number ``attempt`` (0-based)."""
    return rng.uniform(0.0, base * factor**attempt)


class OpenAICompatibleBackend:
    """Client for ``POST {base_url}/chat/completions``.

    Safe to share between threads; at most ``config.max_in_flight`` requests are
    outstanding at once.
    """

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        self.config = config
        self.model = config.model
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout_s,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> OpenAICompatibleBackend:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _delay(self, attempt: int) -> float:
        with self._rng_lock:
            return backoff_delay(attempt, self._rng)

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        retries = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(
                        "/chat/completions", json=request.payload(), headers=self._headers()
                    )
            except httpx.TimeoutException as exc:
                err: LLMError = RequestTimeout(f"request timed out after {self.config.timeout_s}s")
                err.__cause__ = exc
            except httpx.TransportError as exc:
                err = ServerError(f"transport error: {exc}")
                err.__cause__ = exc
            else:
                status = resp.status_code
                if status < 400:
                    return _parse_completion(resp, retries)
                if status == 429:
                    err = RateLimited(f"HTTP 429 from {self.config.base_url}")
                elif status >= 500:
                    err = ServerError(f"HTTP {status} from {self.config.base_url}")
                else:
                    raise BadRequest(f"HTTP {status}: {resp.text[:500]}")
            if retries >= self.config.max_retries:
                raise err
            delay = self._delay(retries)
            retries += 1
            logger.warning("%s; retry %d/%d in %.2fs", err, retries, self.config.max_retries, delay)
            self._sleep(delay)


def _parse_completion(resp: httpx.Response, retries: int) -> ChatResponse:
    try:
        body = resp.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected completion body: {resp.text[:500]}") from exc
    if content is None:
        content = ""
    if not isinstance(content, str):
        raise MalformedResponse("choices[0].message.content is not a string")
    usage = body.get("usage") or {}
    return ChatResponse(
        content=content,
        prompt_tokens=int(usage.get("prompt_tokens") or 0),
        completion_tokens=int(usage.get("completion_tokens") or 0),
        retries=retries,
    )


def complete(request: ChatRequest, config: BackendConfig) -> ChatResponse:
    """One-shot completion against a remote endpoint."""
    request.validate()
    with OpenAICompatibleBackend(config) as backend:
        return backend.complete(request)


Responder = Callable[[ChatRequest], str]


@dataclass
class MockBackend:
    """Offline backend with scripted answers.

    ``script`` is either a list of responses popped in order, a mapping from
    :func:`request_digest` keys to responses, or a callable computing the
    response from the request. The last two are pure functions of the request,
    so they stay deterministic under concurrency.
    """

    script: Sequence[str] | Mapping[str, str] | Responder
    model: str = "mock"
    calls: list[ChatRequest] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if not callable(self.script) and not self.script:
            raise ValueError("mock script must not be empty")
        if not callable(self.script) and not isinstance(self.script, Mapping):
            self._queue = list(self.script)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        with self._lock:
            self.calls.append(request)
            if callable(self.script):
                content = None
            elif isinstance(self.script, Mapping):
                key = request_digest(request.model, request.messages)
                if key not in self.script:
                    raise UnknownKey(f"no scripted response for request {key[:12]}")
                content = self.script[key]
            else:
                if not self._queue:
                    raise ScriptExhausted(f"mock {self.model!r} has no responses left")
                content = self._queue.pop(0)
        if content is None:
            content = self.script(request)  # type: ignore[operator]
        prompt_tokens = sum(len(m["content"].split()) for m in request.messages)
        return ChatResponse(content, prompt_tokens, len(content.split()))


def mock_backend(script: Sequence[str] | Mapping[str, str] | Responder, model: str = "mock") -> MockBackend:
    return MockBackend(script, model=model)
