"""Typed pipeline configuration parsed from YAML.

A task file has the blocks ``data_config``, ``graph_config``,
``output_config`` and the optional ``schema_config`` / ``quality_config``.
Parsing collects every problem it can find instead of stopping at the first
one; errors raise :class:`ConfigError`, warnings ride along on
``PipelineConfig.diagnostics``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any

import yaml

from .templates import placeholders
from .typeexpr import NUMERIC, TypeExprError, parse_type

START = "START"
END = "END"

NODE_TYPES = ("llm", "multi_llm", "weighted_sampler", "lambda", "agent", "subgraph")
FILE_FORMATS = ("json", "jsonl", "csv", "parquet")
PART_KINDS = ("text", "image_url", "audio_url")
ROLES = ("system", "user", "assistant")
SCHEMA_RULES = ("is_greater_than", "is_less_than", "regex", "non_empty")
TOP_LEVEL_KEYS = ("data_config", "graph_config", "output_config", "schema_config", "quality_config")
HUB_ONLY_SINK_KEYS = ("push_to_hub", "token", "private")


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class Diagnostic:
    level: str  # "error", "warning" or "note"
    path: str
    message: str
    line: int | None = None
    column: int | None = None

    @property
    def is_error(self) -> bool:
        return self.level == "error"

    def __str__(self) -> str:
        loc = f" (line {self.line}, column {self.column})" if self.line is not None else ""
        return f"{self.level.upper()} {self.path}: {self.message}{loc}"


class DiagnosticError(Exception):
    """Raised when a step produced at least one error diagnostic."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        errors = [str(d) for d in self.diagnostics if d.is_error]
        super().__init__("\n".join(errors) or "invalid configuration")


class ConfigError(DiagnosticError):
    pass


class PathNotFound(KeyError):
    def __init__(self, segment: str, path: str = ""):
        self.segment = segment
        self.path = path
        super().__init__(segment)

    def __str__(self) -> str:
        return f"no such config path segment {self.segment!r} in {self.path!r}"


class NonScalarPath(ValueError):
    pass


def has_errors(diagnostics: list[Diagnostic]) -> bool:
    return any(d.is_error for d in diagnostics)


# --------------------------------------------------------------------------
# configuration types


@dataclass
class SourceSpec:
    kind: str  # hf | disk | none
    file_path: str | None = None
    file_format: str | None = None
    repo_id: str | None = None
    config_name: str | None = None
    split: list[str] | None = None
    streaming: bool = False


@dataclass
class SinkSpec:
    kind: str  # hf | disk
    file_path: str | None = None
    file_format: str | None = None
    repo_id: str | None = None
    config_name: str | None = None
    split: str | None = None
    push_to_hub: bool = False


@dataclass
class TransformSpec:
    kind: str  # rename_fields | combine_records | skip_records
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class DataConfig:
    source: SourceSpec | None = None
    sink: SinkSpec | None = None
    transforms: list[TransformSpec] = field(default_factory=list)


@dataclass
class GraphSettings:
    chat_conversation: str = "singleturn"
    chat_history_window_size: int = 5
    loop_budget: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def as_values(self) -> dict[str, Any]:
        out = dict(self.extra)
        out["chat_conversation"] = self.chat_conversation
        out["chat_history_window_size"] = self.chat_history_window_size
        return out


@dataclass
class PromptPart:
    kind: str  # text | image_url | audio_url
    payload: str


@dataclass
class PromptMessage:
    role: str
    parts: list[PromptPart]


@dataclass
class ModelSpec:
    name: str
    parameters: dict[str, Any] = field(default_factory=dict)


@dataclass
class SamplerChoice:
    value: Any
    weight: float


@dataclass
class FieldDef:
    type: str
    description: str | None = None
    rules: dict[str, Any] = field(default_factory=dict)


@dataclass
class StructuredOutputSpec:
    enabled: bool = True
    schema_ref: str | None = None
    fields: dict[str, FieldDef] | None = None
    retries: int = 2


@dataclass
class NodeSpec:
    name: str
    node_type: str
    prompt: list[PromptMessage] = field(default_factory=list)
    model: ModelSpec | None = None
    models: list[ModelSpec] = field(default_factory=list)
    output_keys: list[str] = field(default_factory=list)
    lambda_: str | None = None
    tools: list[str] = field(default_factory=list)
    inject_system_messages: dict[int, str] = field(default_factory=dict)
    structured_output: StructuredOutputSpec | None = None
    pre_process: str | None = None
    post_process: str | None = None
    sampler: list[SamplerChoice] = field(default_factory=list)
    subgraph: str | None = None
    max_turns: int | None = None

    def template_placeholders(self) -> list[str]:
        names: list[str] = []
        for msg in self.prompt:
            for part in msg.parts:
                for n in placeholders(part.payload):
                    if n not in names:
                        names.append(n)
        return names


@dataclass
class EdgeSpec:
    source: str
    target: str | None = None
    condition: str | None = None
    path_map: dict[str, str] | None = None

    @property
    def conditional(self) -> bool:
        return self.condition is not None


@dataclass
class GraphConfig:
    settings: GraphSettings = field(default_factory=GraphSettings)
    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    edges: list[EdgeSpec] = field(default_factory=list)


@dataclass
class SchemaField:
    name: str
    type: str
    rules: dict[str, Any] = field(default_factory=dict)


@dataclass
class SchemaConfig:
    schema_ref: str | None = None
    fields: list[SchemaField] = field(default_factory=list)


@dataclass
class OutputField:
    name: str
    kind: str  # from | value | transform
    operand: Any


@dataclass
class OutputConfig:
    output_map: dict[str, OutputField] = field(default_factory=dict)
    generator: str | None = None


DEFAULT_REFUSALS = (
    "i'm sorry, but i can't",
    "i am sorry, but i cannot",
    "as an ai language model",
    "i cannot help with that",
    "i can't assist with that",
)


@dataclass
class QualityConfig:
    conversation_key: str = "conversation"
    min_chars: int = 8
    max_chars: int = 16384
    ngram: int = 4
    repetition_threshold: float = 0.3
    refusal_phrases: tuple[str, ...] = DEFAULT_REFUSALS
    hard_flags: tuple[str, ...] = (
        "too_short", "too_long", "high_repetition", "empty_turn", "refusal_phrase", "non_utf8_artifact",
    )
    threshold: float = 3.0
    judge_model: str = "judge"
    judge_parameters: dict[str, Any] = field(default_factory=lambda: {"temperature": 0.0})


@dataclass
class PipelineConfig:
    graph: GraphConfig
    output: OutputConfig
    data: DataConfig | None = None
    schema: SchemaConfig | None = None
    quality: QualityConfig | None = None
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
    diagnostics: list[Diagnostic] = field(default_factory=list, compare=False, repr=False)

    @property
    def source(self) -> SourceSpec | None:
        if self.data is None or self.data.source is None or self.data.source.kind == "none":
            return None
        return self.data.source

    @property
    def sink(self) -> SinkSpec | None:
        return self.data.sink if self.data else None

    def config_hash(self) -> str:
        canonical = json.dumps(dump_pipeline(self), sort_keys=True, default=str, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# parsing


class _Collector:
    def __init__(self):
        self.diags: list[Diagnostic] = []

    def error(self, path: str, message: str, **kw) -> None:
        self.diags.append(Diagnostic("error", path, message, **kw))

    def warn(self, path: str, message: str) -> None:
        self.diags.append(Diagnostic("warning", path, message))

    def unknown_keys(self, mapping: dict, known, path: str) -> None:
        for key in mapping:
            if key not in known:
                self.warn(f"{path}.{key}", f"unknown key {key!r} ignored")


def parse_pipeline_config(text: str | bytes) -> PipelineConfig:
    """Parse and validate task YAML.

    Raises ConfigError carrying every diagnostic when any error is found.
    Never lets an arbitrary input escape as anything other than ConfigError.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark else None
        col = mark.column + 1 if mark else None
        raise ConfigError([Diagnostic("error", "<yaml>", f"YAML syntax error: {exc.problem or exc}", line, col)])
    except Exception as exc:  # noqa: BLE001 - fuzz-safe contract
        raise ConfigError([Diagnostic("error", "<yaml>", f"unreadable YAML: {exc}")])
    try:
        return build_pipeline_config(doc)
    except ConfigError:
        raise
    except RecursionError:
        raise ConfigError([Diagnostic("error", "<root>", "document nested too deeply")])
    except Exception as exc:  # noqa: BLE001
        raise ConfigError([Diagnostic("error", "<root>", f"malformed configuration: {exc!r}")])


def build_pipeline_config(doc: Any) -> PipelineConfig:
    """Validate an already-loaded YAML document."""
    c = _Collector()
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError([Diagnostic("error", "<root>", "top level must be a mapping")])
    c.unknown_keys(doc, TOP_LEVEL_KEYS, "<root>")

    data = None
    if "data_config" in doc and doc["data_config"] is not None:
        data = _parse_data(doc["data_config"], c)

    if doc.get("graph_config") is None:
        c.error("graph_config", "missing graph_config")
        graph = GraphConfig()
    else:
        graph = parse_graph_config(doc["graph_config"], "graph_config", c)

    if doc.get("output_config") is None:
        c.error("output_config", "missing output_config")
        output = OutputConfig()
    else:
        output = _parse_output(doc["output_config"], c)

    if data is None or data.source is None or data.source.kind == "none":
        if data is None or data.sink is None:
            c.error("data_config.sink", "data-less mode requires data_config.sink")

    schema = None
    if doc.get("schema_config") is not None:
        schema = _parse_schema(doc["schema_config"], c)

    quality = None
    if doc.get("quality_config") is not None:
        quality = _parse_quality(doc["quality_config"], c)

    if has_errors(c.diags):
        raise ConfigError(c.diags)
    return PipelineConfig(
        graph=graph, output=output, data=data, schema=schema, quality=quality,
        raw=copy.deepcopy(doc), diagnostics=c.diags,
    )


def _expect_mapping(value: Any, path: str, c: _Collector) -> dict | None:
    if not isinstance(value, dict):
        c.error(path, f"expected a mapping, got {type(value).__name__}")
        return None
    return value


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _parse_kind(raw_type: Any, path: str, c: _Collector, allowed) -> tuple[str | None, str | None]:
    t = str(raw_type).lower() if raw_type is not None else None
    if t in FILE_FORMATS:
        return "disk", t
    if t in allowed:
        return t, None
    c.error(path, f"unknown type {raw_type!r}")
    return None, None


def _split_list(value: Any, path: str, c: _Collector) -> list[str] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return [value]
    if isinstance(value, list) and all(isinstance(s, str) for s in value):
        return list(value)
    c.error(path, "split must be a string or list of strings")
    return None


def _parse_data(raw: Any, c: _Collector) -> DataConfig | None:
    m = _expect_mapping(raw, "data_config", c)
    if m is None:
        return None
    c.unknown_keys(m, ("source", "sink", "transformations", "transforms"), "data_config")
    data = DataConfig()
    transforms_raw = list(m.get("transformations") or m.get("transforms") or [])

    if m.get("source") is not None:
        src = _expect_mapping(m["source"], "data_config.source", c)
        if src is not None:
            c.unknown_keys(
                src,
                ("type", "file_path", "file_format", "repo_id", "config_name", "split", "streaming",
                 "transformations", "transforms"),
                "data_config.source",
            )
            kind, fmt = _parse_kind(src.get("type", "disk"), "data_config.source.type", c, ("hf", "disk", "none"))
            spec = SourceSpec(
                kind=kind or "none",
                file_path=src.get("file_path"),
                file_format=(src.get("file_format") or fmt),
                repo_id=src.get("repo_id"),
                config_name=src.get("config_name"),
                split=_split_list(src.get("split"), "data_config.source.split", c),
                streaming=bool(src.get("streaming", False)),
            )
            if spec.file_format is not None:
                spec.file_format = str(spec.file_format).lower()
            if spec.kind == "disk":
                if not spec.file_path:
                    c.error("data_config.source.file_path", "disk source requires file_path")
                if not spec.file_format:
                    c.error("data_config.source.file_format", "disk source requires file_format")
                elif spec.file_format not in FILE_FORMATS:
                    c.error("data_config.source.file_format", f"unsupported file_format {spec.file_format!r}")
            elif spec.kind == "hf" and not spec.repo_id:
                c.error("data_config.source.repo_id", "hf source requires repo_id")
            data.source = spec
            transforms_raw = list(src.get("transformations") or src.get("transforms") or []) + transforms_raw

    if m.get("sink") is not None:
        snk = _expect_mapping(m["sink"], "data_config.sink", c)
        if snk is not None:
            c.unknown_keys(
                snk,
                ("type", "file_path", "file_format", "repo_id", "config_name", "split") + HUB_ONLY_SINK_KEYS,
                "data_config.sink",
            )
            kind, fmt = _parse_kind(snk.get("type", "disk"), "data_config.sink.type", c, ("hf", "disk"))
            spec = SinkSpec(
                kind=kind or "disk",
                file_path=snk.get("file_path"),
                file_format=(snk.get("file_format") or fmt),
                repo_id=None if snk.get("repo_id") is None else str(snk.get("repo_id")),
                config_name=snk.get("config_name"),
                split=snk.get("split"),
                push_to_hub=bool(snk.get("push_to_hub", False)),
            )
            if spec.file_format:
                spec.file_format = str(spec.file_format).lower()
            # the path extension wins over a generic "json" type (".jsonl" paths hold lines)
            if spec.file_path and str(spec.file_path).endswith(".jsonl") and spec.file_format == "json":
                spec.file_format = "jsonl"
            for key in HUB_ONLY_SINK_KEYS:
                if key in snk:
                    c.warn(f"data_config.sink.{key}", f"{key} accepted but ignored: hub push disabled")
            if spec.kind == "disk":
                if not spec.file_path:
                    c.error("data_config.sink.file_path", "disk sink requires file_path")
                if spec.file_format not in FILE_FORMATS:
                    c.error("data_config.sink.file_format", f"unsupported file_format {spec.file_format!r}")
            elif spec.kind == "hf" and not spec.repo_id:
                c.error("data_config.sink.repo_id", "hf sink requires repo_id")
            data.sink = spec

    for i, t in enumerate(transforms_raw):
        spec = _parse_transform(t, f"data_config.transformations[{i}]", c)
        if spec is not None:
            data.transforms.append(spec)
    return data


_TRANSFORM_ALIASES = {
    "renamefields": "rename_fields",
    "renamefieldstransform": "rename_fields",
    "combinerecords": "combine_records",
    "combinerecordstransform": "combine_records",
    "skiprecords": "skip_records",
    "skiprecordstransform": "skip_records",
}


def _parse_strategy(value: Any, path: str, c: _Collector) -> dict | None:
    if value in ("first", "last"):
        return {"strategy": value}
    if value == "join":
        return {"strategy": "join", "delimiter": "\n"}
    if isinstance(value, dict) and set(value) == {"join"}:
        return {"strategy": "join", "delimiter": str(value["join"])}
    if isinstance(value, dict) and value.get("strategy") in ("first", "last", "join"):
        out = {"strategy": value["strategy"]}
        if value["strategy"] == "join":
            out["delimiter"] = str(value.get("delimiter", "\n"))
        return out
    c.error(path, f"unknown field strategy {value!r} (expected join, first or last)")
    return None


def _parse_transform(raw: Any, path: str, c: _Collector) -> TransformSpec | None:
    m = _expect_mapping(raw, path, c)
    if m is None:
        return None
    name = m.get("transform") or m.get("type") or m.get("kind")
    if not isinstance(name, str):
        c.error(path, "transform requires a name")
        return None
    key = name.rsplit(".", 1)[-1].replace("_", "").lower()
    kind = _TRANSFORM_ALIASES.get(key)
    if kind is None:
        c.error(f"{path}.transform", f"unknown transform {name!r}")
        return None
    params = m.get("params") or {}
    if not isinstance(params, dict):
        c.error(f"{path}.params", "params must be a mapping")
        return None
    p = f"{path}.params"
    if kind == "rename_fields":
        mapping = params.get("mapping") or {}
        if not isinstance(mapping, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in mapping.items()):
            c.error(f"{p}.mapping", "mapping must map field names to field names")
            return None
        targets = list(mapping.values())
        if len(set(targets)) != len(targets):
            c.error(f"{p}.mapping", "rename targets must be distinct")
        return TransformSpec(kind, {"mapping": dict(mapping), "overwrite": bool(params.get("overwrite", False))})
    if kind == "skip_records":
        skip = _parse_skip(params, p, c)
        return TransformSpec(kind, skip) if skip is not None else None
    num = params.get("num_records", params.get("combine", 2))
    shift = params.get("shift", 1)
    if not _is_int(num) or num < 2:
        c.error(f"{p}.num_records", "num_records must be an integer >= 2")
    if not _is_int(shift) or shift < 1:
        c.error(f"{p}.shift", "shift must be an integer >= 1")
    strategies = {}
    raw_strats = params.get("field_strategies") or {}
    if not isinstance(raw_strats, dict):
        c.error(f"{p}.field_strategies", "field_strategies must be a mapping")
        raw_strats = {}
    for fname, val in raw_strats.items():
        s = _parse_strategy(val, f"{p}.field_strategies.{fname}", c)
        if s is not None:
            strategies[str(fname)] = s
    out = {"num_records": num, "shift": shift, "field_strategies": strategies}
    if params.get("skip") is not None:
        skip = _parse_skip(params["skip"], f"{p}.skip", c)
        if skip is not None:
            out["skip"] = skip
    return TransformSpec(kind, out)


def _parse_skip(params: Any, path: str, c: _Collector) -> dict | None:
    if not isinstance(params, dict):
        c.error(path, "skip params must be a mapping")
        return None
    start = params.get("from_start", params.get("from_beginning", 0))
    end = params.get("from_end", 0)
    ok = True
    for name, v in (("from_start", start), ("from_end", end)):
        if not _is_int(v) or v < 0:
            c.error(f"{path}.{name}", f"{name} must be an integer >= 0")
            ok = False
    return {"from_start": start, "from_end": end} if ok else None


_NODE_KEYS = (
    "node_type", "prompt", "model", "models", "output_keys", "lambda", "tools", "inject_system_messages",
    "structured_output", "pre_process", "post_process", "sampler", "subgraph", "max_turns",
)


def parse_graph_config(raw: Any, path: str = "graph_config", c: _Collector | None = None) -> GraphConfig:
    """Parse a graph block. Standalone calls raise ConfigError on errors."""
    standalone = c is None
    c = c or _Collector()
    graph = GraphConfig()
    m = _expect_mapping(raw, path, c)
    if m is not None:
        c.unknown_keys(m, ("nodes", "edges", "graph_properties", "settings"), path)
        graph.settings = _parse_settings(m.get("graph_properties") or m.get("settings") or {}, f"{path}.graph_properties", c)
        nodes = m.get("nodes")
        if nodes is None:
            c.error(f"{path}.nodes", "graph has no nodes")
        elif _expect_mapping(nodes, f"{path}.nodes", c) is not None:
            for name, spec in nodes.items():
                name = str(name)
                if name in (START, END):
                    c.error(f"{path}.nodes.{name}", f"{name} is reserved")
                    continue
                node = _parse_node(name, spec, f"{path}.nodes.{name}", c)
                if node is not None:
                    graph.nodes[name] = node
        edges = m.get("edges")
        if edges is None:
            c.error(f"{path}.edges", "graph has no edges")
        elif not isinstance(edges, list):
            c.error(f"{path}.edges", "edges must be a list")
        else:
            for i, e in enumerate(edges):
                edge = _parse_edge(e, f"{path}.edges[{i}]", c)
                if edge is not None:
                    graph.edges.append(edge)
    if standalone and has_errors(c.diags):
        raise ConfigError(c.diags)
    return graph


def _parse_settings(raw: Any, path: str, c: _Collector) -> GraphSettings:
    s = GraphSettings()
    if _expect_mapping(raw, path, c) is None:
        return s
    mode = raw.get("chat_conversation", "singleturn")
    if mode not in ("singleturn", "multiturn"):
        c.error(f"{path}.chat_conversation", f"chat_conversation must be singleturn or multiturn, got {mode!r}")
    else:
        s.chat_conversation = mode
    win = raw.get("chat_history_window_size", 5)
    if not _is_int(win) or win < 1:
        c.error(f"{path}.chat_history_window_size", "chat_history_window_size must be a positive integer")
    else:
        s.chat_history_window_size = win
    budget = raw.get("loop_budget")
    if budget is not None:
        if not _is_int(budget) or budget < 1:
            c.error(f"{path}.loop_budget", "loop_budget must be a positive integer")
        else:
            s.loop_budget = budget
    s.extra = {k: v for k, v in raw.items() if k not in ("chat_conversation", "chat_history_window_size", "loop_budget")}
    return s


def _parse_model(raw: Any, path: str, c: _Collector) -> ModelSpec | None:
    if isinstance(raw, str):
        return ModelSpec(raw)
    m = _expect_mapping(raw, path, c)
    if m is None:
        return None
    if not isinstance(m.get("name"), str):
        c.error(f"{path}.name", "model requires a name")
        return None
    params = m.get("parameters") or {}
    if not isinstance(params, dict):
        c.error(f"{path}.parameters", "parameters must be a mapping")
        params = {}
    return ModelSpec(m["name"], dict(params))


def _parse_part(raw: Any, path: str, c: _Collector) -> PromptPart | None:
    if isinstance(raw, str):
        return PromptPart("text", raw)
    m = _expect_mapping(raw, path, c)
    if m is None:
        return None
    kind = m.get("type", "text")
    if kind not in PART_KINDS:
        c.error(f"{path}.type", f"unknown part type {kind!r}")
        return None
    payload = m.get(kind)
    if isinstance(payload, dict) and kind != "text":
        payload = payload.get("url")
    if not isinstance(payload, str):
        c.error(f"{path}.{kind}", f"{kind} part requires a string payload")
        return None
    return PromptPart(kind, payload)


def _parse_prompt(raw: Any, path: str, c: _Collector) -> list[PromptMessage]:
    if isinstance(raw, (str, dict)):
        raw = [raw if isinstance(raw, dict) else {"user": raw}]
    if not isinstance(raw, list):
        c.error(path, "prompt must be a list of role-keyed messages")
        return []
    out = []
    for i, item in enumerate(raw):
        p = f"{path}[{i}]"
        if not isinstance(item, dict):
            c.error(p, "prompt message must be a mapping")
            continue
        if "role" in item:
            role, content = item.get("role"), item.get("content")
        elif len(item) == 1:
            role, content = next(iter(item.items()))
        else:
            c.error(p, "prompt message must have exactly one role key")
            continue
        if role not in ROLES:
            c.error(p, f"unknown role {role!r}")
            continue
        items = content if isinstance(content, list) else [content]
        parts = []
        for j, part in enumerate(items):
            if part is None:
                c.error(p, "empty prompt message")
                continue
            pp = _parse_part(part, f"{p}.{role}[{j}]", c)
            if pp is not None:
                parts.append(pp)
        if parts:
            out.append(PromptMessage(role, parts))
    return out


def _parse_structured(raw: Any, path: str, c: _Collector) -> StructuredOutputSpec | None:
    m = _expect_mapping(raw, path, c)
    if m is None:
        return None
    spec = StructuredOutputSpec(enabled=bool(m.get("enabled", True)))
    retries = m.get("retries", 2)
    if not _is_int(retries) or retries < 0:
        c.error(f"{path}.retries", "retries must be an integer >= 0")
    else:
        spec.retries = retries
    schema = m.get("schema")
    if isinstance(schema, str):
        spec.schema_ref = schema
    elif isinstance(schema, dict):
        fields = schema.get("fields", schema)
        if not isinstance(fields, dict) or not fields:
            c.error(f"{path}.schema.fields", "fields must be a non-empty mapping")
            return spec
        spec.fields = {}
        for fname, fdef in fields.items():
            fp = f"{path}.schema.fields.{fname}"
            if isinstance(fdef, str):
                fdef = {"type": fdef}
            if not isinstance(fdef, dict) or "type" not in fdef:
                c.error(fp, "field requires a type")
                continue
            try:
                parse_type(fdef["type"])
            except TypeExprError as exc:
                c.error(f"{fp}.type", str(exc))
                continue
            rules = {k: v for k, v in fdef.items() if k not in ("type", "description")}
            for d in _rule_diagnostics(str(fname), fdef["type"], rules, fp):
                c.diags.append(d)
            spec.fields[str(fname)] = FieldDef(fdef["type"], fdef.get("description"), rules)
    else:
        c.error(f"{path}.schema", "schema must be a dotted class name or an inline field map")
    return spec


def _parse_sampler(raw: Any, path: str, c: _Collector) -> list[SamplerChoice]:
    if isinstance(raw, dict):
        raw = [{"value": k, "weight": v} for k, v in raw.items()]
    if not isinstance(raw, list) or not raw:
        c.error(path, "sampler must be a non-empty list of {value, weight}")
        return []
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "value" not in item:
            c.error(f"{path}[{i}]", "sampler choice requires value and weight")
            continue
        w = item.get("weight", 1)
        if not _is_number(w) or w < 0:
            c.error(f"{path}[{i}].weight", "weight must be a number >= 0")
            continue
        out.append(SamplerChoice(item["value"], float(w)))
    if out and sum(ch.weight for ch in out) <= 0:
        c.error(path, "sampler weights must sum to > 0")
    return out


def _parse_node(name: str, raw: Any, path: str, c: _Collector) -> NodeSpec | None:
    m = _expect_mapping(raw, path, c)
    if m is None:
        return None
    c.unknown_keys(m, _NODE_KEYS, path)
    node_type = m.get("node_type")
    if node_type not in NODE_TYPES:
        c.error(f"{path}.node_type", f"unknown node_type {node_type!r}")
        return None
    node = NodeSpec(name=name, node_type=node_type)
    if "prompt" in m:
        node.prompt = _parse_prompt(m["prompt"], f"{path}.prompt", c)
    if m.get("model") is not None:
        node.model = _parse_model(m["model"], f"{path}.model", c)
    if m.get("models") is not None:
        models = m["models"]
        if isinstance(models, dict):
            models = [{"name": k, **(v or {})} if isinstance(v, dict) or v is None else v for k, v in models.items()]
        if not isinstance(models, list):
            c.error(f"{path}.models", "models must be a list")
        else:
            for i, mm in enumerate(models):
                ms = _parse_model(mm, f"{path}.models[{i}]", c)
                if ms is not None:
                    node.models.append(ms)
    keys = m.get("output_keys")
    if keys is not None:
        if isinstance(keys, str):
            node.output_keys = [keys]
        elif isinstance(keys, list) and all(isinstance(k, str) for k in keys):
            node.output_keys = list(keys)
        else:
            c.error(f"{path}.output_keys", "output_keys must be a name or list of names")
    for attr, key in (("lambda_", "lambda"), ("pre_process", "pre_process"), ("post_process", "post_process"),
                      ("subgraph", "subgraph")):
        val = m.get(key)
        if val is not None:
            if not isinstance(val, str):
                c.error(f"{path}.{key}", f"{key} must be a dotted name")
            else:
                setattr(node, attr, val)
    tools = m.get("tools")
    if tools is not None:
        if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
            c.error(f"{path}.tools", "tools must be a list of dotted names")
        else:
            node.tools = list(tools)
    inject = m.get("inject_system_messages")
    if inject is not None:
        if not isinstance(inject, dict):
            c.error(f"{path}.inject_system_messages", "inject_system_messages must map turn numbers to text")
        else:
            for k, v in inject.items():
                try:
                    turn = int(k)
                except (TypeError, ValueError):
                    c.error(f"{path}.inject_system_messages.{k}", "turn key must be an integer")
                    continue
                if turn < 1 or not isinstance(v, str):
                    c.error(f"{path}.inject_system_messages.{k}", "turn must be >= 1 with text content")
                    continue
                node.inject_system_messages[turn] = v
    if m.get("structured_output") is not None:
        node.structured_output = _parse_structured(m["structured_output"], f"{path}.structured_output", c)
    if m.get("sampler") is not None:
        node.sampler = _parse_sampler(m["sampler"], f"{path}.sampler", c)
    if m.get("max_turns") is not None:
        mt = m["max_turns"]
        if not _is_int(mt) or mt < 1:
            c.error(f"{path}.max_turns", "max_turns must be an integer >= 1")
        else:
            node.max_turns = mt

    if node_type == "llm":
        if node.model is None:
            c.error(path, "llm node requires model")
        if not node.prompt:
            c.warn(path, "llm node has no prompt; only chat history will be sent")
    elif node_type == "multi_llm":
        if not node.models:
            c.error(f"{path}.models", "multi_llm node requires a non-empty models list")
        if len(node.output_keys) > 1:
            c.error(f"{path}.output_keys", "multi_llm stores its result map under a single output key")
    elif node_type == "lambda":
        if node.lambda_ is None:
            c.error(path, "lambda node requires lambda")
    elif node_type == "weighted_sampler":
        if not node.sampler and "sampler" not in m:
            c.error(path, "weighted_sampler node requires sampler")
        if len(node.output_keys) > 1:
            c.error(f"{path}.output_keys", "weighted_sampler stores one value under a single output key")
    elif node_type == "agent":
        if node.model is None:
            c.error(path, "agent node requires model")
    elif node_type == "subgraph":
        if node.subgraph is None:
            c.error(path, "subgraph node requires subgraph reference")
    return node


def _parse_edge(raw: Any, path: str, c: _Collector) -> EdgeSpec | None:
    m = _expect_mapping(raw, path, c)
    if m is None:
        return None
    c.unknown_keys(m, ("from", "to", "condition", "path_map"), path)
    src = m.get("from")
    if not isinstance(src, str):
        c.error(f"{path}.from", "edge requires from")
        return None
    has_to = m.get("to") is not None
    has_cond = m.get("condition") is not None
    if has_to and has_cond:
        c.error(path, "edge sets both to and condition")
        return None
    if not has_to and not has_cond:
        c.error(path, "edge requires to or condition with path_map")
        return None
    if has_to:
        if m.get("path_map") is not None:
            c.error(path, "path_map is only valid with condition")
            return None
        if not isinstance(m["to"], str):
            c.error(f"{path}.to", "to must be a node name")
            return None
        return EdgeSpec(src, target=m["to"])
    if not isinstance(m["condition"], str):
        c.error(f"{path}.condition", "condition must be a dotted router name")
        return None
    pm = m.get("path_map")
    if not isinstance(pm, dict) or not pm:
        c.error(f"{path}.path_map", "conditional edge requires a non-empty path_map")
        return None
    if not all(isinstance(v, str) for v in pm.values()):
        c.error(f"{path}.path_map", "path_map values must be node names or END")
        return None
    return EdgeSpec(src, condition=m["condition"], path_map={str(k): v for k, v in pm.items()})


def _parse_output(raw: Any, c: _Collector) -> OutputConfig:
    out = OutputConfig()
    m = _expect_mapping(raw, "output_config", c)
    if m is None:
        return out
    omap = m.get("output_map")
    stray = {k: v for k, v in m.items() if k not in ("output_map", "generator")}
    if omap is None and stray and all(isinstance(v, dict) for v in stray.values()):
        # output_map written with its entries at the same indentation level
        c.warn("output_config.output_map", "entries found beside an empty output_map; treating them as its members")
        omap, stray = stray, {}
    for key in stray:
        c.warn(f"output_config.{key}", f"unknown key {key!r} ignored")
    if m.get("generator") is not None:
        if isinstance(m["generator"], str):
            out.generator = m["generator"]
        else:
            c.error("output_config.generator", "generator must be a dotted name")
    if omap is None:
        return out
    if not isinstance(omap, dict):
        c.error("output_config.output_map", "output_map must be a mapping")
        return out
    for name, spec in omap.items():
        p = f"output_config.output_map.{name}"
        if not isinstance(spec, dict):
            c.error(p, "output field must be a mapping with from, value or transform")
            continue
        present = [k for k in ("from", "value", "transform") if k in spec]
        if len(present) != 1:
            c.error(p, f"output field must set exactly one of from/value/transform (got {present or 'none'})")
            continue
        kind = present[0]
        operand = spec[kind]
        if kind in ("from", "transform") and not isinstance(operand, str):
            c.error(f"{p}.{kind}", f"{kind} must be a name")
            continue
        c.unknown_keys(spec, ("from", "value", "transform"), p)
        out.output_map[str(name)] = OutputField(str(name), kind, operand)
    return out


def _rule_diagnostics(name: str, type_text: str, rules: dict, path: str) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    try:
        t = parse_type(type_text)
    except TypeExprError as exc:
        return [Diagnostic("error", f"{path}.type", str(exc))]
    for rule, operand in rules.items():
        rp = f"{path}.{rule}"
        if rule not in SCHEMA_RULES:
            diags.append(Diagnostic("error", rp, f"unknown rule {rule!r}"))
            continue
        if rule in ("is_greater_than", "is_less_than"):
            if t.name not in NUMERIC:
                diags.append(Diagnostic("error", rp, f"numeric rule {rule} on {t} field {name!r}"))
            elif not _is_number(operand):
                diags.append(Diagnostic("error", rp, f"{rule} operand must be a number"))
        elif rule == "regex":
            if t.name != "str":
                diags.append(Diagnostic("error", rp, f"regex rule on {t} field {name!r}"))
            elif not isinstance(operand, str):
                diags.append(Diagnostic("error", rp, "regex operand must be a string"))
            else:
                try:
                    re.compile(operand)
                except re.error as exc:
                    diags.append(Diagnostic("error", rp, f"invalid regex: {exc}"))
        elif rule == "non_empty":
            if t.name not in ("str", "list", "dict"):
                diags.append(Diagnostic("error", rp, f"non_empty rule on {t} field {name!r}"))
            elif not isinstance(operand, bool):
                diags.append(Diagnostic("error", rp, "non_empty operand must be true or false"))
    return diags


def validate_schema_rules(schema: SchemaConfig) -> list[Diagnostic]:
    """Check every rule is compatible with its field's declared type."""
    diags: list[Diagnostic] = []
    for i, f in enumerate(schema.fields):
        diags.extend(_rule_diagnostics(f.name, f.type, f.rules, f"schema_config.fields[{i}]"))
    return diags


def _parse_schema(raw: Any, c: _Collector) -> SchemaConfig | None:
    m = _expect_mapping(raw, "schema_config", c)
    if m is None:
        return None
    c.unknown_keys(m, ("schema", "fields"), "schema_config")
    has_ref, has_fields = m.get("schema") is not None, m.get("fields") is not None
    if has_ref == has_fields:
        c.error("schema_config", "schema_config requires exactly one of schema or fields")
        return None
    if has_ref:
        if not isinstance(m["schema"], str):
            c.error("schema_config.schema", "schema must be a dotted validator name")
            return None
        return SchemaConfig(schema_ref=m["schema"])
    fields_raw = m["fields"]
    if not isinstance(fields_raw, list):
        c.error("schema_config.fields", "fields must be a list")
        return None
    schema = SchemaConfig()
    for i, f in enumerate(fields_raw):
        p = f"schema_config.fields[{i}]"
        if not isinstance(f, dict) or not isinstance(f.get("name"), str) or "type" not in f:
            c.error(p, "schema field requires name and type")
            continue
        rules = {k: v for k, v in f.items() if k not in ("name", "type", "description")}
        schema.fields.append(SchemaField(f["name"], str(f["type"]), rules))
    c.diags.extend(validate_schema_rules(schema))
    return schema


def _parse_quality(raw: Any, c: _Collector) -> QualityConfig | None:
    m = _expect_mapping(raw, "quality_config", c)
    if m is None:
        return None
    q = QualityConfig()
    for key, value in m.items():
        if not hasattr(q, key):
            c.warn(f"quality_config.{key}", f"unknown key {key!r} ignored")
            continue
        if key in ("refusal_phrases", "hard_flags"):
            value = tuple(str(v).lower() if key == "refusal_phrases" else str(v) for v in (value or ()))
        setattr(q, key, value)
    return q


# --------------------------------------------------------------------------
# serialization and $-paths


def _dump_parts(msg: PromptMessage) -> Any:
    if len(msg.parts) == 1 and msg.parts[0].kind == "text":
        return msg.parts[0].payload
    return [{"type": p.kind, p.kind: p.payload} for p in msg.parts]


def _dump_model(m: ModelSpec) -> dict:
    return {"name": m.name, "parameters": dict(m.parameters)}


def dump_node(n: NodeSpec) -> dict:
    d: dict[str, Any] = {"node_type": n.node_type}
    if n.prompt:
        d["prompt"] = [{msg.role: _dump_parts(msg)} for msg in n.prompt]
    if n.model:
        d["model"] = _dump_model(n.model)
    if n.models:
        d["models"] = [_dump_model(m) for m in n.models]
    if n.output_keys:
        d["output_keys"] = list(n.output_keys)
    for attr, key in (("lambda_", "lambda"), ("pre_process", "pre_process"), ("post_process", "post_process"),
                      ("subgraph", "subgraph"), ("max_turns", "max_turns")):
        if getattr(n, attr) is not None:
            d[key] = getattr(n, attr)
    if n.tools:
        d["tools"] = list(n.tools)
    if n.inject_system_messages:
        d["inject_system_messages"] = dict(n.inject_system_messages)
    if n.structured_output:
        so = n.structured_output
        sd: dict[str, Any] = {"enabled": so.enabled, "retries": so.retries}
        if so.schema_ref:
            sd["schema"] = so.schema_ref
        elif so.fields is not None:
            sd["schema"] = {"fields": {
                k: {"type": f.type, **({"description": f.description} if f.description else {}), **f.rules}
                for k, f in so.fields.items()
            }}
        d["structured_output"] = sd
    if n.sampler:
        d["sampler"] = [{"value": ch.value, "weight": ch.weight} for ch in n.sampler]
    return d


def dump_graph(g: GraphConfig) -> dict:
    settings = {
        "chat_conversation": g.settings.chat_conversation,
        "chat_history_window_size": g.settings.chat_history_window_size,
        **g.settings.extra,
    }
    if g.settings.loop_budget is not None:
        settings["loop_budget"] = g.settings.loop_budget
    edges = []
    for e in g.edges:
        ed: dict[str, Any] = {"from": e.source}
        if e.conditional:
            ed["condition"] = e.condition
            ed["path_map"] = dict(e.path_map or {})
        else:
            ed["to"] = e.target
        edges.append(ed)
    return {
        "graph_properties": settings,
        "nodes": {name: dump_node(n) for name, n in g.nodes.items()},
        "edges": edges,
    }


def dump_pipeline(cfg: PipelineConfig) -> dict:
    """Canonical mapping form; parsing it again yields an equal config."""
    doc: dict[str, Any] = {}
    if cfg.data is not None:
        dd: dict[str, Any] = {}
        if cfg.data.source is not None:
            s = cfg.data.source
            sd = {"type": s.kind}
            for key in ("file_path", "file_format", "repo_id", "config_name", "split"):
                if getattr(s, key) is not None:
                    sd[key] = getattr(s, key)
            sd["streaming"] = s.streaming
            dd["source"] = sd
        if cfg.data.sink is not None:
            s = cfg.data.sink
            sd = {"type": s.kind}
            for key in ("file_path", "file_format", "repo_id", "config_name", "split"):
                if getattr(s, key) is not None:
                    sd[key] = getattr(s, key)
            if s.push_to_hub:
                sd["push_to_hub"] = True
            dd["sink"] = sd
        if cfg.data.transforms:
            dd["transformations"] = [{"transform": t.kind, "params": copy.deepcopy(t.params)} for t in cfg.data.transforms]
        doc["data_config"] = dd
    doc["graph_config"] = dump_graph(cfg.graph)
    om = {name: {f.kind: f.operand} for name, f in cfg.output.output_map.items()}
    oc: dict[str, Any] = {"output_map": om}
    if cfg.output.generator:
        oc["generator"] = cfg.output.generator
    doc["output_config"] = oc
    if cfg.schema is not None:
        if cfg.schema.schema_ref:
            doc["schema_config"] = {"schema": cfg.schema.schema_ref}
        else:
            doc["schema_config"] = {"fields": [{"name": f.name, "type": f.type, **f.rules} for f in cfg.schema.fields]}
    if cfg.quality is not None:
        q = cfg.quality
        doc["quality_config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in q.__dict__.items()}
    return doc


def dump_pipeline_yaml(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(dump_pipeline(cfg), sort_keys=False, allow_unicode=True)


_PATH_RE = re.compile(r"\$((?:data|graph|output|schema|quality)_config(?:\.[A-Za-z0-9_\-]+)*)")


def resolve_config_path(config: PipelineConfig | dict, path: str) -> Any:
    """Return the scalar found at a ``$a.b.c`` path in the config tree."""
    if not path.startswith("$"):
        raise ValueError(f"config path must start with '$': {path!r}")
    tree = config.raw if isinstance(config, PipelineConfig) else config
    node: Any = tree
    for seg in path[1:].split("."):
        if isinstance(node, dict) and seg in node:
            node = node[seg]
        elif isinstance(node, list) and seg.isdigit() and int(seg) < len(node):
            node = node[int(seg)]
        else:
            raise PathNotFound(seg, path)
    if isinstance(node, (dict, list)):
        raise NonScalarPath(f"{path} does not name a scalar")
    return node


def substitute_config_paths(config: PipelineConfig | dict, text: str) -> Any:
    """Expand embedded ``$block.path`` references inside a string value.

    A string that is exactly one path yields the referenced scalar unchanged.
    """
    m = _PATH_RE.fullmatch(text)
    if m:
        return resolve_config_path(config, text)
    return _PATH_RE.sub(lambda mm: str(resolve_config_path(config, mm.group(0))), text)
