from __future__ import annotations

import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from propsel.llm import (
    BackendConfig,
    BadRequest,
    ChatRequest,
    MalformedResponse,
    MockBackend,
    OpenAICompatibleBackend,
    RateLimited,
    RequestTimeout,
    ScriptExhausted,
    ServerError,
    UnknownKey,
    backoff_delay,
    request_digest,
)

USER = ({"role": "user", "content": "hello"},)


def completion(text: str = "ok") -> httpx.Response:
    body = {"choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 1}}
    return httpx.Response(200, json=body)


def backend(handler, **cfg) -> tuple[OpenAICompatibleBackend, list[float]]:
    sleeps: list[float] = []
    b = OpenAICompatibleBackend(
        BackendConfig(base_url="http://llm.test/v1", model="m", **cfg),
        transport=httpx.MockTransport(handler), sleep=sleeps.append, seed=0,
    )
    return b, sleeps


def test_retries_rate_limit_then_succeeds():
    statuses = iter([429, 429, 200])

    def handler(req: httpx.Request) -> httpx.Response:
        s = next(statuses)
        return completion("done") if s == 200 else httpx.Response(s)

    b, sleeps = backend(handler)
    resp = b.complete(ChatRequest("m", USER))
    assert (resp.content, resp.retries, resp.prompt_tokens) == ("done", 2, 3)
    assert len(sleeps) == 2
    assert 0 <= sleeps[0] <= 1 and 0 <= sleeps[1] <= 2


def test_no_retry_on_client_error():
    calls = []

    def handler(req):
        calls.append(req)
        return httpx.Response(400, text="bad")

    b, sleeps = backend(handler)
    with pytest.raises(BadRequest):
        b.complete(ChatRequest("m", USER))
    assert len(calls) == 1 and sleeps == []


def test_gives_up_after_max_retries():
    b, sleeps = backend(lambda req: httpx.Response(503), max_retries=2)
    with pytest.raises(ServerError):
        b.complete(ChatRequest("m", USER))
    assert len(sleeps) == 2
    b, _ = backend(lambda req: httpx.Response(429), max_retries=0)
    with pytest.raises(RateLimited):
        b.complete(ChatRequest("m", USER))


def test_timeout_is_retried_then_raised():
    def handler(req):
        raise httpx.ReadTimeout("slow", request=req)

    b, sleeps = backend(handler, max_retries=1)
    with pytest.raises(RequestTimeout):
        b.complete(ChatRequest("m", USER))
    assert len(sleeps) == 1


def test_request_payload_and_auth(monkeypatch):
    seen = {}

    def handler(req):
        seen["url"] = str(req.url)
        seen["auth"] = req.headers.get("authorization")
        seen["body"] = json.loads(req.content)
        return completion()

    monkeypatch.setenv("TEST_KEY_VAR", "sk-123")
    b, _ = backend(handler, api_key_env="TEST_KEY_VAR")
    b.complete(ChatRequest("m", USER, temperature=0.0, max_tokens=10))
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-123"
    assert seen["body"] == {"model": "m", "messages": list(USER), "temperature": 0.0, "max_tokens": 10}


def test_malformed_body():
    b, _ = backend(lambda req: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(MalformedResponse):
        b.complete(ChatRequest("m", USER))


@pytest.mark.parametrize(
    "messages",
    [(), ({"role": "assistant", "content": "x"},), ({"role": "robot", "content": "x"},)],
)
def test_invalid_requests(messages):
    b, _ = backend(lambda req: completion())
    with pytest.raises(BadRequest):
        b.complete(ChatRequest("m", messages))


def test_in_flight_bound():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(req):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return completion()

    b, _ = backend(handler, max_in_flight=2)
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda _: b.complete(ChatRequest("m", USER)), range(16)))
    assert state["peak"] == 2


def test_backoff_delay_bounds():
    rng = random.Random(0)
    for attempt in range(6):
        for _ in range(50):
            assert 0 <= backoff_delay(attempt, rng) <= 2**attempt


def test_mock_sequence():
    m = MockBackend(["a", "b"])
    assert [m.complete(ChatRequest("mock", USER)).content for _ in range(2)] == ["a", "b"]
    with pytest.raises(ScriptExhausted):
        m.complete(ChatRequest("mock", USER))
    assert len(m.calls) == 3


def test_mock_keyed():
    other = ({"role": "user", "content": "other"},)
    m = MockBackend({request_digest("mock", USER): "hi"})
    assert m.complete(ChatRequest("mock", USER)).content == "hi"
    assert m.complete(ChatRequest("mock", USER)).content == "hi"
    with pytest.raises(UnknownKey):
        m.complete(ChatRequest("mock", other))


def test_mock_callable_and_validation():
    m = MockBackend(lambda r: r.messages[-1]["content"].upper())
    assert m.complete(ChatRequest("mock", USER)).content == "HELLO"
    with pytest.raises(BadRequest):
        m.complete(ChatRequest("mock", ()))
    with pytest.raises(ValueError):
        MockBackend([])


def test_digest_is_stable_and_sensitive():
    assert request_digest("a", USER) == request_digest("a", [dict(USER[0])])
    assert request_digest("a", USER) != request_digest("b", USER)
