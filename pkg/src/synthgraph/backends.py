"""Chat-completion backends: an OpenAI-compatible HTTP client and a scriptable mock.

Both share the retry loop in :meth:`Backend.complete`; transient failures
(timeouts, 429, 5xx) are retried with capped exponential backoff.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import logging
import mimetypes
import os
import random
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import httpx
import jsonschema

log = logging.getLogger(__name__)

MESSAGE_ROLES = ("system", "user", "assistant", "tool")


# --------------------------------------------------------------------------
# messages


@dataclass
class Part:
    kind: str  # text | image_url | audio_url
    payload: str


@dataclass
class ToolCall:
    id: str
    name: str
    arguments: str  # JSON text


@dataclass
class ChatMessage:
    role: str
    parts: list[Part]
    tool_call_id: str | None = None
    tool_calls: list[ToolCall] = field(default_factory=list)

    def __post_init__(self):
        if self.role not in MESSAGE_ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.parts:
            raise ValueError("a chat message needs at least one part")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages require tool_call_id")

    @classmethod
    def text(cls, role: str, text: str, **kw) -> "ChatMessage":
        return cls(role, [Part("text", text)], **kw)

    @property
    def content(self) -> str:
        return "".join(p.payload for p in self.parts if p.kind == "text")

    def to_wire(self) -> dict:
        if len(self.parts) == 1 and self.parts[0].kind == "text":
            content: Any = self.parts[0].payload
        else:
            content = []
            for p in self.parts:
                if p.kind == "text":
                    content.append({"type": "text", "text": p.payload})
                else:
                    content.append({"type": p.kind, p.kind: {"url": p.payload}})
        out: dict[str, Any] = {"role": self.role, "content": content}
        if self.tool_call_id:
            out["tool_call_id"] = self.tool_call_id
        if self.tool_calls:
            out["tool_calls"] = [
                {"id": tc.id, "type": "function", "function": {"name": tc.name, "arguments": tc.arguments}}
                for tc in self.tool_calls
            ]
        return out

    @classmethod
    def from_wire(cls, d: dict) -> "ChatMessage":
        content = d.get("content")
        if isinstance(content, list):
            parts = []
            for c in content:
                kind = c.get("type", "text")
                if kind == "text":
                    parts.append(Part("text", c.get("text", "")))
                else:
                    v = c.get(kind)
                    parts.append(Part(kind, v.get("url") if isinstance(v, dict) else v))
        else:
            parts = [Part("text", content or "")]
        calls = [
            ToolCall(tc.get("id", ""), tc["function"]["name"], tc["function"].get("arguments", "{}"))
            for tc in d.get("tool_calls") or []
        ]
        return cls(d["role"], parts, tool_call_id=d.get("tool_call_id"), tool_calls=calls)


@dataclass
class ChatRequest:
    model: str
    messages: list[ChatMessage]
    parameters: dict[str, Any] = field(default_factory=dict)
    response_schema: dict | None = None
    tools: list[dict] | None = None

    def to_wire(self) -> dict:
        body: dict[str, Any] = {"model": self.model, "messages": [m.to_wire() for m in self.messages]}
        body.update(self.parameters)
        if self.tools:
            body["tools"] = self.tools
        if self.response_schema is not None:
            body["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": "structured_output", "schema": self.response_schema},
            }
        return body


@dataclass
class ChatResponse:
    text: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)
    finish_reason: str = "stop"
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    latency_ms: float = 0.0
    attempts: int = 1


# --------------------------------------------------------------------------
# errors


class BackendError(Exception):
    attempts = 1


class TransientBackendError(BackendError):
    def __init__(self, status: int | str, message: str = ""):
        self.status = status
        super().__init__(f"transient failure ({status}) {message}".strip())


class BackendRejected(BackendError):
    def __init__(self, status: int, message: str = ""):
        self.status = status
        super().__init__(f"request rejected ({status}) {message}".strip())


class BackendExhausted(BackendError):
    def __init__(self, last_status: int | str, attempts: int):
        self.last_status = last_status
        self.attempts = attempts
        super().__init__(f"retries exhausted after {attempts} attempts (last status {last_status})")


class StructuredOutputError(BackendError):
    def __init__(self, last_error: str, attempts: int):
        self.last_error = last_error
        self.attempts = attempts
        super().__init__(f"structured output invalid after {attempts} attempts: {last_error}")


class MediaLoadError(Exception):
    def __init__(self, message: str, record: Any = None, field_name: str | None = None):
        self.record = record
        self.field_name = field_name
        where = f" (record {record}, field {field_name})" if record is not None or field_name else ""
        super().__init__(message + where)


# --------------------------------------------------------------------------
# configuration


@dataclass
class Backoff:
    initial_ms: float = 500.0
    multiplier: float = 2.0
    max_ms: float = 8000.0

    def __post_init__(self):
        if self.initial_ms < 0 or self.multiplier < 1 or self.max_ms < self.initial_ms:
            raise ValueError("backoff must be monotone: initial_ms >= 0, multiplier >= 1, max_ms >= initial_ms")

    def delay_ms(self, retry: int) -> float:
        """Delay before retry number ``retry`` (1-based)."""
        return min(self.initial_ms * self.multiplier ** (retry - 1), self.max_ms)


@dataclass
class BackendConfig:
    name: str
    api_style: str = "openai_chat"  # openai_chat | mock
    base_url: str = ""
    model: str | None = None  # wire model id; defaults to name
    api_key_env: str | None = None
    supports_native_schema: bool = False
    max_retries: int = 3
    backoff: Backoff = field(default_factory=Backoff)
    timeout_s: float = 120.0
    max_in_flight: int | None = None
    mock_script: list | None = None
    mock_latency_ms: float = 0.0
    mock_seed: int = 0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if isinstance(self.backoff, dict):
            self.backoff = Backoff(**self.backoff)

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            log.warning("backend %s: unknown keys %s ignored", name, sorted(extra))
        kw = {k: v for k, v in d.items() if k in known and k != "name"}
        if isinstance(kw.get("backoff"), dict):
            kw["backoff"] = Backoff(**kw["backoff"])
        return cls(name=name, **kw)


# --------------------------------------------------------------------------
# backends


class Backend:
    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self._sems: dict[int, asyncio.Semaphore] = {}

    @property
    def supports_native_schema(self) -> bool:
        return self.cfg.supports_native_schema

    def _semaphore(self) -> asyncio.Semaphore | None:
        cap = self.cfg.max_in_flight
        if cap is None:
            return None
        loop_id = id(asyncio.get_running_loop())
        if loop_id not in self._sems:
            self._sems = {loop_id: asyncio.Semaphore(cap)}
        return self._sems[loop_id]

    async def send(self, req: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    async def complete(self, req: ChatRequest) -> ChatResponse:
        """One chat completion with retries on transient failures."""
        last_status: int | str = "?"
        for attempt in range(1, self.cfg.max_retries + 2):
            if attempt > 1:
                await asyncio.sleep(self.cfg.backoff.delay_ms(attempt - 1) / 1000)
            sem = self._semaphore()
            start = time.perf_counter()
            try:
                if sem is None:
                    resp = await self.send(req)
                else:
                    async with sem:
                        resp = await self.send(req)
            except TransientBackendError as exc:
                last_status = exc.status
                log.debug("%s attempt %d failed: %s", self.cfg.name, attempt, exc)
                continue
            except BackendRejected as exc:
                exc.attempts = attempt
                raise
            resp.latency_ms = (time.perf_counter() - start) * 1000
            resp.attempts = attempt
            if resp.text and resp.tool_calls:
                log.info("%s returned both text and tool calls; keeping both", self.cfg.name)
            return resp
        raise BackendExhausted(last_status, self.cfg.max_retries + 1)

    async def aclose(self) -> None:
        pass


class OpenAIChatBackend(Backend):
    """``POST {base_url}/chat/completions`` against any OpenAI-compatible server."""

    def __init__(self, cfg: BackendConfig, transport: httpx.AsyncBaseTransport | None = None):
        if cfg.max_in_flight is None:
            cfg.max_in_flight = 32
        super().__init__(cfg)
        self._transport = transport
        self._clients: dict[int, httpx.AsyncClient] = {}

    def _client(self) -> httpx.AsyncClient:
        loop_id = id(asyncio.get_running_loop())
        client = self._clients.get(loop_id)
        if client is None:
            headers = {"Content-Type": "application/json"}
            if self.cfg.api_key_env:
                token = os.environ.get(self.cfg.api_key_env)
                if token:
                    headers["Authorization"] = f"Bearer {token}"
                else:
                    log.warning("%s: environment variable %s is not set", self.cfg.name, self.cfg.api_key_env)
            client = httpx.AsyncClient(
                base_url=self.cfg.base_url.rstrip("/"), headers=headers,
                timeout=self.cfg.timeout_s, transport=self._transport,
            )
            self._clients[loop_id] = client
        return client

    async def send(self, req: ChatRequest) -> ChatResponse:
        body = req.to_wire()
        body["model"] = self.cfg.model or req.model
        if req.response_schema is not None and not self.cfg.supports_native_schema:
            body.pop("response_format", None)
        try:
            r = await self._client().post("/chat/completions", json=body)
        except httpx.TimeoutException as exc:
            raise TransientBackendError("timeout", str(exc)) from exc
        except httpx.TransportError as exc:
            raise TransientBackendError("connection", str(exc)) from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientBackendError(r.status_code, r.text[:200])
        if r.status_code >= 400:
            raise BackendRejected(r.status_code, r.text[:500])
        try:
            data = r.json()
            choice = data["choices"][0]
            msg = choice.get("message") or {}
        except (ValueError, KeyError, IndexError) as exc:
            raise TransientBackendError(r.status_code, f"malformed response body: {exc}") from exc
        calls = [
            ToolCall(tc.get("id", f"call_{i}"), tc["function"]["name"], tc["function"].get("arguments") or "{}")
            for i, tc in enumerate(msg.get("tool_calls") or [])
        ]
        usage = data.get("usage") or {}
        return ChatResponse(
            text=msg.get("content") or "",
            tool_calls=calls,
            finish_reason=choice.get("finish_reason") or "stop",
            usage={"prompt_tokens": usage.get("prompt_tokens", 0), "completion_tokens": usage.get("completion_tokens", 0)},
        )

    async def aclose(self) -> None:
        for client in self._clients.values():
            await client.aclose()
        self._clients.clear()


def request_digest(req: ChatRequest, seed: int = 0) -> str:
    payload = json.dumps(
        {"seed": seed, "model": req.model, "messages": [m.to_wire() for m in req.messages],
         "schema": req.response_schema},
        sort_keys=True, default=str,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def synthesize_from_schema(schema: dict, rng: random.Random) -> Any:
    """Produce a value conforming to a (simple) JSON schema."""
    t = schema.get("type")
    if isinstance(t, list):
        t = t[0]
    if "enum" in schema:
        return rng.choice(schema["enum"])
    if t == "object" or "properties" in schema:
        props = schema.get("properties", {})
        return {k: synthesize_from_schema(v, rng) for k, v in props.items()}
    if t == "array":
        return [synthesize_from_schema(schema.get("items", {}), rng) for _ in range(rng.randint(1, 3))]
    if t == "integer":
        lo = schema.get("exclusiveMinimum", schema.get("minimum", -1) - 1) + 1
        hi = schema.get("exclusiveMaximum", schema.get("maximum", lo + 1001) + 1) - 1
        return rng.randint(int(lo), int(max(lo, hi)))
    if t == "number":
        lo = schema.get("exclusiveMinimum", schema.get("minimum", 0.0))
        hi = schema.get("exclusiveMaximum", schema.get("maximum", 1.0))
        return round(rng.uniform(lo, hi), 4)
    if t == "boolean":
        return rng.random() < 0.5
    if t == "string":
        return f"text-{rng.getrandbits(32):08x}"
    return None


class MockBackend(Backend):
    """Deterministic backend for tests and benchmarks.

    Responses come from, in order of precedence: the ``script`` list
    (consumed one entry per call), a ``responder(request)`` callable, or a
    digest of the request. A script entry is a string (text reply), a dict
    with ``text`` / ``tool_calls`` / ``json`` / ``status`` keys, or an
    exception instance to raise. ``status`` entries simulate HTTP failures.
    """

    def __init__(self, cfg: BackendConfig | None = None, *, script: list | None = None,
                 responder: Callable[[ChatRequest], Any] | None = None, latency_ms: float | None = None,
                 seed: int | None = None):
        cfg = cfg or BackendConfig(name="mock", api_style="mock", max_retries=3, backoff=Backoff(0, 1, 0))
        super().__init__(cfg)
        self.script = list(script if script is not None else (cfg.mock_script or []))
        self.responder = responder
        self.latency_ms = cfg.mock_latency_ms if latency_ms is None else latency_ms
        self.seed = cfg.mock_seed if seed is None else seed
        self.calls = 0
        self.requests: list[ChatRequest] = []

    def _default(self, req: ChatRequest) -> Any:
        digest = request_digest(req, self.seed)
        if req.response_schema is not None:
            return {"json": synthesize_from_schema(req.response_schema, random.Random(digest))}
        return f"mock response {digest[:12]}"

    async def send(self, req: ChatRequest) -> ChatResponse:
        self.calls += 1
        self.requests.append(req)
        if self.latency_ms:
            await asyncio.sleep(self.latency_ms / 1000)
        if self.script:
            entry = self.script.pop(0)
        elif self.responder is not None:
            entry = self.responder(req)
        else:
            entry = self._default(req)
        return self._to_response(entry)

    @staticmethod
    def _to_response(entry: Any) -> ChatResponse:
        if isinstance(entry, BaseException):
            raise entry
        if isinstance(entry, ChatResponse):
            return entry
        if isinstance(entry, str):
            return ChatResponse(text=entry, usage={"prompt_tokens": 0, "completion_tokens": len(entry.split())})
        if isinstance(entry, dict):
            status = entry.get("status")
            if status is not None:
                if status == "timeout" or status == 429 or int(status) >= 500:
                    raise TransientBackendError(status, "scripted failure")
                raise BackendRejected(int(status), "scripted rejection")
            if "json" in entry:
                return ChatResponse(text=json.dumps(entry["json"]))
            calls = [
                ToolCall(tc.get("id", f"call_{i}"), tc["name"],
                         tc["arguments"] if isinstance(tc.get("arguments"), str) else json.dumps(tc.get("arguments", {})))
                for i, tc in enumerate(entry.get("tool_calls") or [])
            ]
            return ChatResponse(text=entry.get("text", ""), tool_calls=calls,
                                finish_reason="tool_calls" if calls else "stop")
        raise TypeError(f"unsupported mock script entry {entry!r}")


def make_backend(cfg: BackendConfig) -> Backend:
    if cfg.api_style == "mock":
        return MockBackend(cfg)
    if cfg.api_style in ("openai_chat", "openai"):
        return OpenAIChatBackend(cfg)
    raise ValueError(f"unknown api_style {cfg.api_style!r}")


class BackendPool:
    """Model name to backend lookup; ``fallback`` serves unknown names (e.g. a global mock)."""

    def __init__(self, backends: dict[str, Backend] | None = None, fallback: Backend | None = None):
        self.backends = dict(backends or {})
        self.fallback = fallback

    def get(self, name: str) -> Backend:
        if name in self.backends:
            return self.backends[name]
        if self.fallback is not None:
            return self.fallback
        raise KeyError(f"no backend configured for model {name!r}")

    def names(self) -> set[str] | None:
        return None if self.fallback is not None else set(self.backends)

    @classmethod
    def from_mapping(cls, models: dict[str, dict]) -> "BackendPool":
        return cls({name: make_backend(BackendConfig.from_dict(name, spec or {})) for name, spec in models.items()})

    async def aclose(self) -> None:
        for b in {id(b): b for b in [*self.backends.values(), self.fallback] if b is not None}.values():
            await b.aclose()


# --------------------------------------------------------------------------
# structured output


@dataclass
class StructuredResult:
    value: Any
    retries: int
    response: ChatResponse


_JSON_FENCE = re.compile(r"^```(?:json)?\s*\n?(.*?)\n?```\s*$", re.S)


def _parse_json_text(text: str) -> Any:
    t = text.strip()
    m = _JSON_FENCE.match(t)
    if m:
        t = m.group(1)
    return json.loads(t)


async def complete_structured(backend: Backend, req: ChatRequest, schema: dict,
                              schema_retries: int = 2) -> StructuredResult:
    """Get a reply that parses as JSON and validates against ``schema``.

    Native-schema backends receive the schema with the request. Every reply
    is validated; on failure the error is appended as a corrective system
    message and the request repeated, up to ``schema_retries`` times.
    """
    validator = jsonschema.Draft202012Validator(schema)
    messages = list(req.messages)
    if not backend.supports_native_schema:
        messages.append(ChatMessage.text(
            "system", "Respond only with a JSON object that conforms to this JSON schema:\n"
            + json.dumps(schema, sort_keys=True)))
    last_error = ""
    for retry in range(schema_retries + 1):
        # non-native HTTP backends drop response_format from the wire body
        attempt = ChatRequest(req.model, messages, dict(req.parameters), response_schema=schema, tools=req.tools)
        resp = await backend.complete(attempt)
        try:
            value = _parse_json_text(resp.text)
            errors = sorted(validator.iter_errors(value), key=lambda e: list(e.path))
            if errors:
                e = errors[0]
                loc = "/".join(str(p) for p in e.path) or "<root>"
                raise ValueError(f"{loc}: {e.message}")
        except (ValueError, TypeError) as exc:
            last_error = str(exc)
            log.debug("structured output rejected (retry %d): %s", retry, last_error)
            messages = messages + [
                ChatMessage.text("assistant", resp.text or " "),
                ChatMessage.text("system", f"The previous reply was invalid: {last_error}. "
                                           "Reply again with only valid JSON matching the schema."),
            ]
            continue
        return StructuredResult(value, retry, resp)
    raise StructuredOutputError(last_error, schema_retries + 1)


# --------------------------------------------------------------------------
# media

_EXTRA_MIME = {".wav": "audio/wav", ".mp3": "audio/mpeg", ".flac": "audio/flac", ".ogg": "audio/ogg",
               ".m4a": "audio/mp4", ".webp": "image/webp"}


def _guess_mime(name: str) -> str | None:
    ext = Path(name.split("?", 1)[0]).suffix.lower()
    return _EXTRA_MIME.get(ext) or mimetypes.guess_type(name.split("?", 1)[0])[0]


def encode_media(ref: Any, base_dir: str | Path = ".", mime: str | None = None) -> str:
    """Return ``data:<mime>;base64,<payload>`` for a media reference.

    ``ref`` may be a data URL (returned unchanged), a local path, an http(s)
    URL, raw bytes, or a mapping with ``path``/``url``/``bytes`` and an
    optional ``mime``.
    """
    if isinstance(ref, dict):
        mime = ref.get("mime") or mime
        if ref.get("bytes") is not None:
            raw = ref["bytes"]
            if isinstance(raw, str):
                raw = base64.b64decode(raw)
            return _data_url(raw, mime or _guess_mime(str(ref.get("path") or "")) or "application/octet-stream")
        ref = ref.get("path") or ref.get("url") or ref.get("src")
    if isinstance(ref, (bytes, bytearray)):
        return _data_url(bytes(ref), mime or "application/octet-stream")
    if not isinstance(ref, str) or not ref:
        raise MediaLoadError(f"unsupported media reference {ref!r}")
    if ref.startswith("data:"):
        return ref
    if ref.startswith(("http://", "https://")):
        try:
            r = httpx.get(ref, timeout=30.0, follow_redirects=True)
            r.raise_for_status()
        except httpx.HTTPError as exc:
            raise MediaLoadError(f"cannot fetch {ref}: {exc}") from exc
        header_mime = r.headers.get("content-type", "").split(";")[0].strip() or None
        return _data_url(r.content, mime or header_mime or _guess_mime(ref) or "application/octet-stream")
    path = Path(ref)
    if not path.is_absolute():
        path = Path(base_dir) / path
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MediaLoadError(f"cannot read media file {path}: {exc}") from exc
    return _data_url(raw, mime or _guess_mime(str(path)) or "application/octet-stream")


def _data_url(raw: bytes, mime: str) -> str:
    return f"data:{mime};base64,{base64.b64encode(raw).decode('ascii')}"
