"""Per-node execution against a record's state."""

from __future__ import annotations

import asyncio
import hashlib
import inspect
import json
import random
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable

from .backends import (
    BackendError, BackendPool, ChatMessage, ChatRequest, MediaLoadError, Part, complete_structured, encode_media,
)
from .compiler import BoundNode, Tool
from .config import GraphSettings, PromptMessage
from .templates import sole_placeholder, substitute, to_text

DEFAULT_MAX_TURNS = 8


@dataclass
class NodeTrace:
    node: str
    attempt: int
    duration_ms: float = 0.0
    error: str | None = None
    error_kind: str | None = None
    backend_attempts: int = 0
    schema_retries: int = 0
    partial_errors: list[str] = field(default_factory=list)
    turns: list[dict] = field(default_factory=list)


class RecordState:
    """Mutable state of one record travelling through the graph."""

    def __init__(self, record_id: Any, values: dict | None = None):
        self._record_id = record_id
        self.values: dict[str, Any] = dict(values or {})
        self.history: list[ChatMessage] = []
        self.trace: list[NodeTrace] = []
        self.executions: Counter[str] = Counter()

    @property
    def record_id(self) -> Any:
        return self._record_id

    @property
    def total_executions(self) -> int:
        return sum(self.executions.values())

    def messages(self) -> list[dict]:
        """History as plain ``{role, content}`` dicts."""
        return [{"role": m.role, "content": m.content} for m in self.history if m.role in ("system", "user", "assistant")]


class NodeError(Exception):
    """An error raised inside a node executor."""


class MissingKeyError(NodeError):
    def __init__(self, node: str, key: str):
        self.node = node
        self.key = key
        super().__init__(f"node {node}: missing value for placeholder {{{key}}}")


class UndeclaredOutputError(NodeError):
    def __init__(self, node: str, keys: list[str]):
        self.keys = keys
        super().__init__(f"node {node}: undeclared output {', '.join(sorted(keys))}")


class AgentBudgetExceeded(NodeError):
    def __init__(self, node: str, max_turns: int):
        super().__init__(f"agent {node} produced no final answer within {max_turns} turns")


class NodeFailure(Exception):
    """A node failed; carries enough to write a failure-log line."""

    def __init__(self, node: str, cause: BaseException, attempts: int = 1):
        self.node = node
        self.cause = cause
        self.error_kind = type(cause).__name__
        self.attempts = attempts
        super().__init__(f"{node}: {self.error_kind}: {cause}")


# --------------------------------------------------------------------------
# prompt rendering


def _lookup(node: str, values: dict, settings: dict) -> Callable[[str], Any]:
    def get(key: str) -> Any:
        if key in values:
            return values[key]
        if key in settings:
            return settings[key]
        raise MissingKeyError(node, key)
    return get


def render_templates(templates: list[PromptMessage], values: dict, settings: GraphSettings | None = None,
                     node: str = "", base_dir: str | Path = ".") -> list[ChatMessage]:
    settings = settings or GraphSettings()
    get = _lookup(node, values, settings.as_values())
    out = []
    for msg in templates:
        parts = []
        for p in msg.parts:
            if p.kind == "text":
                parts.append(Part("text", substitute(p.payload, get)))
                continue
            name = sole_placeholder(p.payload)
            ref = get(name) if name else substitute(p.payload, get)
            try:
                parts.append(Part(p.kind, encode_media(ref, base_dir)))
            except MediaLoadError as exc:
                raise MediaLoadError(str(exc), record=values.get("__index"), field_name=name or p.payload) from exc
        out.append(ChatMessage(msg.role, parts))
    return out


def with_history(rendered: list[ChatMessage], history: list[ChatMessage], settings: GraphSettings) -> list[ChatMessage]:
    """Insert the trailing history window after leading system messages (multiturn only)."""
    if settings.chat_conversation != "multiturn" or not history:
        return list(rendered)
    window = history[-settings.chat_history_window_size:]
    i = 0
    while i < len(rendered) and rendered[i].role == "system":
        i += 1
    return rendered[:i] + list(window) + rendered[i:]


def render_prompt(templates: list[PromptMessage], values: dict, settings: GraphSettings | None = None,
                  history: list[ChatMessage] | None = None, node: str = "",
                  base_dir: str | Path = ".") -> list[ChatMessage]:
    settings = settings or GraphSettings()
    return with_history(render_templates(templates, values, settings, node, base_dir), history or [], settings)


def sampler_seed(run_seed: int, record_id: Any, node: str) -> int:
    digest = hashlib.sha256(f"{run_seed}|{record_id}|{node}".encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


async def _maybe_await(value):
    if inspect.isawaitable(value):
        return await value
    return value


# --------------------------------------------------------------------------
# runtime


class NodeRuntime:
    def __init__(self, backends: BackendPool, settings: GraphSettings | None = None, run_seed: int = 0,
                 base_dir: str | Path = "."):
        self.backends = backends
        self.settings = settings or GraphSettings()
        self.run_seed = run_seed
        self.base_dir = Path(base_dir)
        self._tool_locks: dict[str, asyncio.Lock] = {}
        self._executors = {
            "llm": self.exec_llm,
            "multi_llm": self.exec_multi_llm,
            "weighted_sampler": self.exec_weighted_sampler,
            "lambda": self.exec_lambda,
            "agent": self.exec_agent,
        }

    async def execute(self, node: BoundNode, state: RecordState) -> None:
        """Run hooks and the node's executor; append exactly one trace entry."""
        state.executions[node.name] += 1
        trace = NodeTrace(node.name, state.executions[node.name])
        start = time.perf_counter()
        try:
            if node.pre is not None:
                await self.run_hook(node.pre, state)
            outputs = await self._executors[node.kind](node, state, trace)
            allowed = set(node.output_keys)
            if node.kind == "agent":
                allowed |= {f"{k}__transcript" for k in node.output_keys}
            extra = [k for k in outputs if k not in allowed]
            if extra:
                raise UndeclaredOutputError(node.name, extra)
            state.values.update(outputs)
            if node.post is not None:
                await self.run_hook(node.post, state)
        except Exception as exc:
            trace.error = str(exc)
            trace.error_kind = type(exc).__name__
            raise NodeFailure(node.name, exc, attempts=max(1, trace.backend_attempts,
                                                           getattr(exc, "attempts", 1))) from exc
        finally:
            trace.duration_ms = (time.perf_counter() - start) * 1000
            state.trace.append(trace)

    async def run_hook(self, hook: Callable, state: RecordState) -> None:
        """Hooks get a copy of the values and may mutate it or return a replacement."""
        values = dict(state.values)
        result = await _maybe_await(hook(values))
        if result is None:
            state.values = values
        elif isinstance(result, dict):
            state.values = dict(result)
        else:
            raise TypeError(f"hook returned {type(result).__name__}, expected a mapping or None")

    async def _render(self, node: BoundNode, state: RecordState) -> list[ChatMessage]:
        args = (node.spec.prompt, state.values, self.settings, node.name, self.base_dir)
        if any(p.kind != "text" for m in node.spec.prompt for p in m.parts):
            return await asyncio.to_thread(render_templates, *args)
        return render_templates(*args)

    async def exec_llm(self, node: BoundNode, state: RecordState, trace: NodeTrace) -> dict:
        rendered = await self._render(node, state)
        messages = with_history(rendered, state.history, self.settings)
        model = node.spec.model
        backend = self.backends.get(model.name)
        req = ChatRequest(model.name, messages, dict(model.parameters))
        if node.response_schema is not None:
            so = node.spec.structured_output
            result = await complete_structured(backend, req, node.response_schema, so.retries)
            trace.backend_attempts = result.response.attempts
            trace.schema_retries = result.retries
            value = result.value
            if node.schema_model is not None:
                value = node.schema_model.model_validate(value).model_dump(mode="json")
            if isinstance(value, dict) and all(k in value for k in node.output_keys):
                outputs = {k: value[k] for k in node.output_keys}
            else:
                outputs = {node.output_keys[0]: value}
            reply = json.dumps(value, ensure_ascii=False)
        else:
            resp = await backend.complete(req)
            trace.backend_attempts = resp.attempts
            outputs = {node.output_keys[0]: resp.text}
            reply = resp.text
        state.history.extend(m for m in rendered if m.role != "system")
        state.history.append(ChatMessage.text("assistant", reply))
        return outputs

    async def exec_multi_llm(self, node: BoundNode, state: RecordState, trace: NodeTrace) -> dict:
        rendered = await self._render(node, state)
        messages = with_history(rendered, state.history, self.settings)

        async def one(m):
            return await self.backends.get(m.name).complete(ChatRequest(m.name, list(messages), dict(m.parameters)))

        results = await asyncio.gather(*(one(m) for m in node.spec.models), return_exceptions=True)
        out: dict[str, str] = {}
        first_error: BaseException | None = None
        for m, r in zip(node.spec.models, results):
            if isinstance(r, BaseException):
                if not isinstance(r, Exception):
                    raise r
                trace.partial_errors.append(f"{m.name}: {type(r).__name__}: {r}")
                first_error = first_error or r
            else:
                out[m.name] = r.text
                trace.backend_attempts = max(trace.backend_attempts, r.attempts)
        if not out:
            raise first_error
        return {node.output_keys[0]: out}

    async def exec_weighted_sampler(self, node: BoundNode, state: RecordState, trace: NodeTrace) -> dict:
        rng = random.Random(sampler_seed(self.run_seed, state.record_id, node.name))
        choices = node.spec.sampler
        value = rng.choices([c.value for c in choices], weights=[c.weight for c in choices], k=1)[0]
        return {node.output_keys[0]: value}

    async def exec_lambda(self, node: BoundNode, state: RecordState, trace: NodeTrace) -> dict:
        result = await _maybe_await(node.fn(MappingProxyType(state.values)))
        if result is None:
            return {}
        if not isinstance(result, dict):
            raise TypeError(f"lambda returned {type(result).__name__}, expected a mapping")
        return dict(result)

    async def _call_tool(self, tool: Tool | None, name: str, arguments: str) -> str:
        if tool is None:
            return f"error: unknown tool {name!r}"
        try:
            args = json.loads(arguments or "{}")
            if not isinstance(args, dict):
                raise ValueError("tool arguments must be a JSON object")
            if inspect.iscoroutinefunction(tool.fn):
                result = await tool.fn(**args)
            elif tool.serialized:
                lock = self._tool_locks.setdefault(tool.name, asyncio.Lock())
                async with lock:
                    result = await asyncio.to_thread(tool.fn, **args)
            else:
                result = await asyncio.to_thread(tool.fn, **args)
        except Exception as exc:  # noqa: BLE001 - tool errors go back to the model
            return f"error: {type(exc).__name__}: {exc}"
        return to_text(result)

    async def exec_agent(self, node: BoundNode, state: RecordState, trace: NodeTrace) -> dict:
        spec = node.spec
        rendered = await self._render(node, state)
        messages = with_history(rendered, state.history, self.settings)
        fresh_from = len(messages)
        backend = self.backends.get(spec.model.name)
        tools = {t.name: t for t in node.tools}
        signatures = [t.signature() for t in node.tools] or None
        max_turns = spec.max_turns or DEFAULT_MAX_TURNS
        final: str | None = None
        for turn in range(1, max_turns + 1):
            if turn in spec.inject_system_messages:
                messages.append(ChatMessage.text("system", spec.inject_system_messages[turn]))
            resp = await backend.complete(
                ChatRequest(spec.model.name, list(messages), dict(spec.model.parameters), tools=signatures))
            trace.backend_attempts += resp.attempts
            trace.turns.append({"turn": turn, "tool_calls": [tc.name for tc in resp.tool_calls],
                                "latency_ms": round(resp.latency_ms, 3)})
            if not resp.tool_calls:
                messages.append(ChatMessage.text("assistant", resp.text))
                if resp.text:
                    final = resp.text
                break
            messages.append(ChatMessage("assistant", [Part("text", resp.text)], tool_calls=list(resp.tool_calls)))
            for tc in resp.tool_calls:
                result = await self._call_tool(tools.get(tc.name), tc.name, tc.arguments)
                messages.append(ChatMessage.text("tool", result, tool_call_id=tc.id or tc.name))
        if final is None:
            raise AgentBudgetExceeded(node.name, max_turns)
        state.history.extend(m for m in rendered if m.role != "system")
        state.history.extend(messages[fresh_from:])
        key = node.output_keys[0]
        return {key: final, f"{key}__transcript": [m.to_wire() for m in messages]}


__all__ = [
    "AgentBudgetExceeded", "BackendError", "MissingKeyError", "NodeFailure", "NodeRuntime", "NodeTrace",
    "RecordState", "UndeclaredOutputError", "render_prompt", "render_templates", "sampler_seed", "with_history",
]
