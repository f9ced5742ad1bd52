from __future__ import annotations

import base64
import json

import httpx
import pytest
from hypothesis import given, strategies as st

from synthgraph.backends import (
    BackendConfig, BackendExhausted, BackendRejected, Backoff, ChatMessage, ChatRequest, MediaLoadError,
    MockBackend, OpenAIChatBackend, Part, StructuredOutputError, complete_structured, encode_media,
)

from conftest import run_async

QA_SCHEMA = {
    "type": "object",
    "properties": {"answer": {"type": "string"}, "confidence": {"type": "number"}},
    "required": ["answer", "confidence"],
}


def req(text="hi", **kw):
    return ChatRequest("m", [ChatMessage.text("user", text)], **kw)


def fast_cfg(**kw):
    return BackendConfig(name="mock", api_style="mock", backoff=Backoff(0, 1, 0), **kw)


def test_message_invariants():
    with pytest.raises(ValueError):
        ChatMessage("user", [])
    with pytest.raises(ValueError):
        ChatMessage.text("tool", "x")
    with pytest.raises(ValueError):
        ChatMessage.text("robot", "x")
    m = ChatMessage("user", [Part("text", "look"), Part("image_url", "data:image/png;base64,AA==")])
    assert ChatMessage.from_wire(m.to_wire()) == m


def test_mock_script_and_latency():
    mock = MockBackend(script=["A"], latency_ms=20)
    resp = run_async(mock.complete(req()))
    assert resp.text == "A" and resp.latency_ms >= 20


def test_mock_retries_then_succeeds():
    mock = MockBackend(fast_cfg(), script=[{"status": 503}, {"status": 503}, "ok"])
    resp = run_async(mock.complete(req()))
    assert resp.attempts == 3 and resp.text == "ok"


def test_no_retry_boundary():
    mock = MockBackend(fast_cfg(max_retries=0), script=[{"status": 503}, "never"])
    with pytest.raises(BackendExhausted) as ei:
        run_async(mock.complete(req()))
    assert ei.value.last_status == 503 and mock.calls == 1


def test_rejected_is_not_retried():
    mock = MockBackend(fast_cfg(), script=[{"status": 400}, "never"])
    with pytest.raises(BackendRejected):
        run_async(mock.complete(req()))
    assert mock.calls == 1


def test_mock_is_deterministic():
    a = run_async(MockBackend().complete(req("same")))
    b = run_async(MockBackend().complete(req("same")))
    c = run_async(MockBackend(seed=1).complete(req("same")))
    assert a.text == b.text != c.text


@given(st.floats(0, 1000), st.floats(1, 4), st.floats(0, 5000))
def test_backoff_monotone_and_capped(initial, mult, extra):
    b = Backoff(initial, mult, initial + extra)
    delays = [b.delay_ms(i) for i in range(1, 12)]
    assert all(x <= y for x, y in zip(delays, delays[1:]))
    assert max(delays) <= b.max_ms


def test_backoff_rejects_non_monotone():
    with pytest.raises(ValueError):
        Backoff(100, 0.5, 1000)


def test_structured_valid_first_time():
    mock = MockBackend(script=[json.dumps({"answer": "x", "confidence": 0.9})])
    res = run_async(complete_structured(mock, req(), QA_SCHEMA))
    assert res.value == {"answer": "x", "confidence": 0.9} and res.retries == 0


def test_structured_one_retry_and_corrective_message():
    mock = MockBackend(script=["not json", json.dumps({"answer": "x", "confidence": 0.5})])
    res = run_async(complete_structured(mock, req(), QA_SCHEMA))
    assert res.retries == 1
    second = mock.requests[1].messages
    assert second[-1].role == "system" and "invalid" in second[-1].content


def test_structured_exhaustion():
    bad = json.dumps({"answer": "x", "confidence": "high"})
    mock = MockBackend(script=[bad] * 3)
    with pytest.raises(StructuredOutputError) as ei:
        run_async(complete_structured(mock, req(), QA_SCHEMA))
    assert mock.calls == 3 and "confidence" in str(ei.value)


def test_structured_mock_default_satisfies_schema():
    res = run_async(complete_structured(MockBackend(), req(), QA_SCHEMA))
    assert set(res.value) == {"answer", "confidence"} and res.retries == 0


def test_encode_media(tmp_path):
    (tmp_path / "x.png").write_bytes(b"abc")
    url = encode_media("x.png", tmp_path)
    assert url == "data:image/png;base64," + base64.b64encode(b"abc").decode()
    assert url == "data:image/png;base64,YWJj"
    assert encode_media(url) == url
    assert encode_media(encode_media("x.png", tmp_path)) == url
    (tmp_path / "a.wav").write_bytes(b"RIFF")
    assert encode_media("a.wav", tmp_path).startswith("data:audio/wav;base64,")
    with pytest.raises(MediaLoadError):
        encode_media("missing.png", tmp_path)


def _openai_reply(content="hello", tool_calls=None):
    msg = {"role": "assistant", "content": content}
    if tool_calls:
        msg["tool_calls"] = tool_calls
    return {"choices": [{"message": msg, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 1}}


def test_openai_wire_and_retry(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "secret")
    seen = []
    statuses = [503, 429, 200]

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        status = statuses.pop(0)
        if status != 200:
            return httpx.Response(status, text="busy")
        return httpx.Response(200, json=_openai_reply())

    cfg = BackendConfig(name="gpt", base_url="http://x/v1", model="wire-model", api_key_env="TEST_KEY",
                        backoff=Backoff(1, 2, 4))
    backend = OpenAIChatBackend(cfg, transport=httpx.MockTransport(handler))

    async def go():
        try:
            return await backend.complete(req(parameters={"temperature": 0.2}, response_schema=QA_SCHEMA))
        finally:
            await backend.aclose()

    resp = run_async(go())
    assert resp.text == "hello" and resp.attempts == 3 and resp.usage["prompt_tokens"] == 3
    r = seen[-1]
    assert r.url.path == "/v1/chat/completions"
    assert r.headers["authorization"] == "Bearer secret"
    body = json.loads(r.content)
    assert body["model"] == "wire-model" and body["temperature"] == 0.2
    assert "response_format" not in body  # non-native backend


def test_openai_native_schema_and_tool_calls():
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return httpx.Response(200, json=_openai_reply(None, [
            {"id": "c1", "type": "function", "function": {"name": "search", "arguments": '{"query": "x"}'}}]))

    cfg = BackendConfig(name="gpt", base_url="http://x", supports_native_schema=True)
    backend = OpenAIChatBackend(cfg, transport=httpx.MockTransport(handler))
    resp = run_async(backend.complete(req(response_schema=QA_SCHEMA)))
    assert bodies[0]["response_format"]["json_schema"]["schema"] == QA_SCHEMA
    assert resp.tool_calls[0].name == "search" and resp.text == ""


def test_openai_rejects_400():
    backend = OpenAIChatBackend(BackendConfig(name="g", base_url="http://x"),
                                transport=httpx.MockTransport(lambda r: httpx.Response(400, text="bad")))
    with pytest.raises(BackendRejected) as ei:
        run_async(backend.complete(req()))
    assert ei.value.status == 400
