"""Compile a GraphConfig into an executable, validated graph.

Compilation inlines subgraphs, resolves every dotted name against the
registry, and checks structure: dangling edges, reachability, duplicate
output keys, unresolvable template placeholders and unconditional cycles.
All problems are collected and raised together as a CompileError.
"""

from __future__ import annotations

import copy
import inspect
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import yaml

from .config import (
    END, START, ConfigError, Diagnostic, DiagnosticError, EdgeSpec, GraphConfig, GraphSettings, NodeSpec,
    StructuredOutputSpec, parse_graph_config,
)
from .registry import Registry, UnresolvedName, as_callable
from .typeexpr import parse_type, to_json_schema

MAX_SUBGRAPH_DEPTH = 8
RECIPES_DIR = Path(__file__).parent / "recipes"


class CompileError(DiagnosticError):
    pass


class RecursionLimit(CompileError):
    pass


# --------------------------------------------------------------------------
# compiled structures


@dataclass
class Tool:
    name: str
    description: str
    parameters: dict
    fn: Callable
    serialized: bool = False

    def signature(self) -> dict:
        return {"type": "function",
                "function": {"name": self.name, "description": self.description, "parameters": self.parameters}}


@dataclass
class BoundNode:
    name: str
    spec: NodeSpec
    output_keys: list[str]
    pre: Callable | None = None
    post: Callable | None = None
    fn: Callable | None = None
    tools: list[Tool] = field(default_factory=list)
    response_schema: dict | None = None
    schema_model: Any = None

    @property
    def kind(self) -> str:
        return self.spec.node_type


@dataclass
class Route:
    target: str | None = None
    router: Callable | None = None
    router_name: str | None = None
    path_map: dict[str, str] | None = None

    @property
    def conditional(self) -> bool:
        return self.router is not None

    def successors(self) -> list[str]:
        if self.conditional:
            return list(dict.fromkeys(self.path_map.values()))
        return [self.target]


@dataclass
class CompiledGraph:
    nodes: dict[str, BoundNode]
    edges: dict[str, Route]
    entry: Route
    loop_budget: int
    settings: GraphSettings
    notes: list[Diagnostic] = field(default_factory=list)

    @property
    def exits(self) -> list[str]:
        return [n for n, r in self.edges.items() if n != START and END in r.successors()]

    def route_of(self, node: str) -> Route:
        return self.entry if node == START else self.edges[node]


# --------------------------------------------------------------------------
# subgraph library and expansion


class SubgraphLibrary:
    """Reusable graphs addressed by name: ``<dir>/<name>.yaml`` in the search dirs."""

    def __init__(self, dirs: list[str | Path] | None = None, graphs: dict[str, GraphConfig] | None = None):
        self.dirs = [Path(d) for d in (dirs or [])] + [RECIPES_DIR]
        self.graphs = dict(graphs or {})

    def get(self, name: str) -> GraphConfig:
        if name in self.graphs:
            return self.graphs[name]
        for d in self.dirs:
            for ext in (".yaml", ".yml"):
                p = d / f"{name}{ext}"
                if p.is_file():
                    doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
                    if isinstance(doc, dict) and "graph_config" in doc:
                        doc = doc["graph_config"]
                    g = parse_graph_config(doc, f"subgraph:{name}")
                    self.graphs[name] = g
                    return g
        raise KeyError(name)


def _prefixed(prefix: str, name: str) -> str:
    return name if name in (START, END) else prefix + name


def expand_subgraph(parent: GraphConfig, node_name: str, library: SubgraphLibrary, depth: int = 1) -> GraphConfig:
    """Inline the subgraph node ``node_name`` with its children prefixed ``<node_name>/``."""
    node = parent.nodes[node_name]
    if depth > MAX_SUBGRAPH_DEPTH:
        raise RecursionLimit([Diagnostic(
            "error", f"graph_config.nodes.{node_name}",
            f"RecursionLimit: subgraph nesting deeper than {MAX_SUBGRAPH_DEPTH} at {node.subgraph!r}")])
    path = f"graph_config.nodes.{node_name}.subgraph"
    try:
        child = library.get(node.subgraph)
    except KeyError:
        raise CompileError([Diagnostic("error", path, f"unknown subgraph {node.subgraph!r}")]) from None
    except ConfigError as exc:
        raise CompileError(exc.diagnostics) from None
    child = expand_all(child, library, depth + 1)
    prefix = f"{node_name}/"

    entries = [e for e in child.edges if e.source == START]
    if len(entries) != 1 or entries[0].conditional:
        raise CompileError([Diagnostic("error", path, "subgraph must have exactly one simple START edge")])
    entry = _prefixed(prefix, entries[0].target)

    nodes: dict[str, NodeSpec] = {}
    for name, spec in parent.nodes.items():
        if name != node_name:
            nodes[name] = spec
            continue
        for cname, cspec in child.nodes.items():
            nodes[prefix + cname] = replace(copy.deepcopy(cspec), name=prefix + cname)

    def retarget(t: str) -> str:
        return entry if t == node_name else t

    outgoing = [e for e in parent.edges if e.source == node_name]
    edges: list[EdgeSpec] = []
    for e in parent.edges:
        if e.source == node_name:
            continue
        if e.conditional:
            edges.append(EdgeSpec(e.source, condition=e.condition,
                                  path_map={k: retarget(v) for k, v in e.path_map.items()}))
        else:
            edges.append(EdgeSpec(e.source, target=retarget(e.target)))
    for ce in child.edges:
        if ce.source == START:
            continue
        src = _prefixed(prefix, ce.source)
        if not ce.conditional:
            if ce.target != END:
                edges.append(EdgeSpec(src, target=_prefixed(prefix, ce.target)))
                continue
            if not outgoing:
                edges.append(EdgeSpec(src, target=END))
            for oe in outgoing:
                if oe.conditional:
                    edges.append(EdgeSpec(src, condition=oe.condition,
                                          path_map={k: retarget(v) for k, v in oe.path_map.items()}))
                else:
                    edges.append(EdgeSpec(src, target=retarget(oe.target)))
            continue
        pm = {}
        for label, t in ce.path_map.items():
            if t != END:
                pm[label] = _prefixed(prefix, t)
            elif not outgoing:
                pm[label] = END
            elif len(outgoing) == 1 and not outgoing[0].conditional:
                pm[label] = retarget(outgoing[0].target)
            else:
                raise CompileError([Diagnostic(
                    "error", path, "a subgraph exiting through a router cannot feed a conditional parent edge")])
        edges.append(EdgeSpec(src, condition=ce.condition, path_map=pm))
    return GraphConfig(settings=parent.settings, nodes=nodes, edges=edges)


def expand_all(graph: GraphConfig, library: SubgraphLibrary, depth: int = 1) -> GraphConfig:
    while True:
        pending = [n for n, spec in graph.nodes.items() if spec.node_type == "subgraph"]
        if not pending:
            return graph
        graph = expand_subgraph(graph, pending[0], library, depth)


# --------------------------------------------------------------------------
# binding helpers


def _field_schema(type_text: str, description: str | None, rules: dict) -> dict:
    t = parse_type(type_text)
    s = to_json_schema(t)
    if description:
        s["description"] = description
    if "is_greater_than" in rules:
        s["exclusiveMinimum"] = rules["is_greater_than"]
    if "is_less_than" in rules:
        s["exclusiveMaximum"] = rules["is_less_than"]
    if "regex" in rules:
        s["pattern"] = f"^(?:{rules['regex']})$"
    if rules.get("non_empty"):
        s[{"str": "minLength", "list": "minItems", "dict": "minProperties"}[t.name]] = 1
    return s


def structured_schema(spec: StructuredOutputSpec, registry: Registry) -> tuple[dict, Any]:
    """JSON schema for a structured-output spec plus the model class, if class-based."""
    if spec.fields is not None:
        props = {name: _field_schema(f.type, f.description, f.rules) for name, f in spec.fields.items()}
        return {"type": "object", "properties": props, "required": list(props)}, None
    obj = registry.resolve(spec.schema_ref)
    if hasattr(obj, "model_json_schema"):
        return obj.model_json_schema(), obj
    if isinstance(obj, dict):
        return obj, None
    raise TypeError(f"{spec.schema_ref!r} is neither a model class nor a JSON schema")


_PY_TO_JSON = {str: "string", int: "integer", float: "number", bool: "boolean", list: "array", dict: "object"}


def make_tool(dotted: str, obj: Any) -> Tool:
    fn = obj if callable(obj) else as_callable(obj)
    name = getattr(obj, "tool_name", None) or dotted.rsplit(".", 1)[-1]
    doc = inspect.getdoc(obj) or ""
    description = getattr(obj, "tool_description", None) or (doc.splitlines()[0] if doc else name)
    params = getattr(obj, "tool_schema", None)
    if params is None:
        props, required = {}, []
        try:
            sig = inspect.signature(fn)
        except (TypeError, ValueError):
            sig = None
        for pname, p in (sig.parameters.items() if sig else []):
            if p.kind in (p.VAR_POSITIONAL, p.VAR_KEYWORD):
                continue
            ann = p.annotation
            if isinstance(ann, str):
                ann = {"str": str, "int": int, "float": float, "bool": bool}.get(ann, str)
            props[pname] = {"type": _PY_TO_JSON.get(ann, "string")}
            if p.default is p.empty:
                required.append(pname)
        params = {"type": "object", "properties": props, "required": required}
    return Tool(name, description, params, fn, bool(getattr(obj, "serialized", False)))


def default_output_keys(spec: NodeSpec, registry: Registry | None = None) -> list[str]:
    if spec.output_keys:
        return list(spec.output_keys)
    so = spec.structured_output
    if so is not None and so.enabled:
        if so.fields:
            return list(so.fields)
        if registry is not None and so.schema_ref:
            try:
                obj = registry.resolve(so.schema_ref)
            except UnresolvedName:
                obj = None
            if hasattr(obj, "model_fields"):
                return list(obj.model_fields)
    return [spec.name]


def _bind_node(spec: NodeSpec, registry: Registry, diags: list[Diagnostic],
               model_names: set[str] | None) -> BoundNode:
    path = f"graph_config.nodes.{spec.name}"
    bound = BoundNode(spec.name, spec, default_output_keys(spec, registry))

    def resolve(name: str, key: str, method: str = "apply"):
        try:
            return as_callable(registry.resolve(name), method)
        except UnresolvedName:
            diags.append(Diagnostic("error", f"{path}.{key}", f"unresolved name {name!r}"))
        except TypeError as exc:
            diags.append(Diagnostic("error", f"{path}.{key}", f"{name!r}: {exc}"))
        return None

    if spec.pre_process:
        bound.pre = resolve(spec.pre_process, "pre_process")
    if spec.post_process:
        bound.post = resolve(spec.post_process, "post_process")
    if spec.lambda_:
        bound.fn = resolve(spec.lambda_, "lambda")
    seen_tools: set[str] = set()
    for t in spec.tools:
        try:
            tool = make_tool(t, registry.resolve(t))
        except UnresolvedName:
            diags.append(Diagnostic("error", f"{path}.tools", f"unresolved name {t!r}"))
            continue
        if tool.name in seen_tools:
            diags.append(Diagnostic("error", f"{path}.tools", f"duplicate tool name {tool.name!r}"))
        seen_tools.add(tool.name)
        bound.tools.append(tool)
    so = spec.structured_output
    if so is not None and so.enabled:
        try:
            bound.response_schema, bound.schema_model = structured_schema(so, registry)
        except UnresolvedName:
            diags.append(Diagnostic("error", f"{path}.structured_output.schema", f"unresolved name {so.schema_ref!r}"))
        except (TypeError, ValueError) as exc:
            diags.append(Diagnostic("error", f"{path}.structured_output.schema", str(exc)))
    if model_names is not None:
        for m in ([spec.model] if spec.model else []) + spec.models:
            if m.name not in model_names:
                diags.append(Diagnostic("error", f"{path}.model", f"no backend configured for model {m.name!r}"))
    if spec.node_type == "multi_llm" and not spec.models:
        diags.append(Diagnostic("error", f"{path}.models", "multi_llm node requires a non-empty models list"))
    return bound


# --------------------------------------------------------------------------
# compile


def _reachable(start: list[str], adj: dict[str, list[str]]) -> set[str]:
    seen = set(start)
    q = deque(start)
    while q:
        n = q.popleft()
        for m in adj.get(n, ()):
            if m not in seen:
                seen.add(m)
                q.append(m)
    return seen


def compile_graph(graph: GraphConfig, registry: Registry, library: SubgraphLibrary | None = None,
                  source_columns: set[str] | None = None, model_names: set[str] | None = None) -> CompiledGraph:
    """Build a CompiledGraph or raise CompileError with every diagnostic found.

    ``source_columns`` lists fields records will carry; ``None`` means
    unknown, which skips placeholder checks against source data.
    """
    library = library or SubgraphLibrary()
    diags: list[Diagnostic] = []
    try:
        graph = expand_all(graph, library)
    except CompileError as exc:
        raise type(exc)(exc.diagnostics) from None

    nodes = {name: _bind_node(spec, registry, diags, model_names) for name, spec in graph.nodes.items()}

    edges: dict[str, Route] = {}
    entry: Route | None = None
    for i, e in enumerate(graph.edges):
        p = f"graph_config.edges[{i}]"
        ok = True
        if e.source == END:
            diags.append(Diagnostic("error", p, "END cannot have outgoing edges"))
            ok = False
        elif e.source != START and e.source not in nodes:
            diags.append(Diagnostic("error", p, f"unknown node {e.source}"))
            ok = False
        targets = list(e.path_map.values()) if e.conditional else [e.target]
        for t in targets:
            if t == START:
                diags.append(Diagnostic("error", p, "START cannot be an edge target"))
                ok = False
            elif t != END and t not in nodes:
                diags.append(Diagnostic("error", p, f"unknown node {t}"))
                ok = False
        router = None
        if e.conditional:
            try:
                router = as_callable(registry.resolve(e.condition))
            except UnresolvedName:
                diags.append(Diagnostic("error", f"{p}.condition", f"unresolved name {e.condition!r}"))
                ok = False
            except TypeError as exc:
                diags.append(Diagnostic("error", f"{p}.condition", f"{e.condition!r}: {exc}"))
                ok = False
        if not ok:
            continue
        route = Route(target=e.target, router=router, router_name=e.condition,
                      path_map=dict(e.path_map) if e.path_map else None)
        if e.source == START:
            if entry is not None:
                diags.append(Diagnostic("error", p, "START has more than one outgoing edge"))
            entry = route
        elif e.source in edges:
            diags.append(Diagnostic("error", p, f"node {e.source} has more than one outgoing edge; fan-out is not supported"))
        else:
            edges[e.source] = route

    if entry is None:
        diags.append(Diagnostic("error", "graph_config.edges", "no edge from START"))
        entry = Route(target=END)

    adj = {n: r.successors() for n, r in edges.items()}
    adj[START] = entry.successors()
    reach = _reachable([START], adj)
    rev: dict[str, list[str]] = {}
    for n, succ in adj.items():
        for s in succ:
            rev.setdefault(s, []).append(n)
    reaches_end = _reachable([END], rev)
    for name in nodes:
        p = f"graph_config.nodes.{name}"
        if name not in edges:
            diags.append(Diagnostic("error", p, f"node {name} has no outgoing edge"))
        if name not in reach:
            diags.append(Diagnostic("error", p, f"node {name} is unreachable from START"))
        elif name in edges and name not in reaches_end:
            diags.append(Diagnostic("error", p, f"END is unreachable from node {name}"))

    producers: dict[str, str] = {}
    for name, b in nodes.items():
        for k in b.output_keys:
            if k in producers:
                diags.append(Diagnostic("error", f"graph_config.nodes.{name}.output_keys",
                                        f"output key {k!r} already produced by node {producers[k]}"))
            else:
                producers[k] = name

    base_keys = set(graph.settings.as_values()) | {"__index"}
    check_sources = source_columns is not None
    if check_sources:
        base_keys |= set(source_columns)
    for name, b in nodes.items():
        wanted = b.spec.template_placeholders()
        if not wanted:
            continue
        ancestors = _reachable(rev.get(name, []), rev) - {START, END}
        available = set(base_keys)
        for a in ancestors:
            if a in nodes:
                available.update(nodes[a].output_keys)
                if nodes[a].kind == "agent":
                    available.update(f"{k}__transcript" for k in nodes[a].output_keys)
        for key in wanted:
            if key in available:
                continue
            if check_sources:
                diags.append(Diagnostic("error", f"graph_config.nodes.{name}.prompt",
                                        f"placeholder {{{key}}} is not produced by any node that can precede {name}"
                                        " and is not a source column"))
            else:
                diags.append(Diagnostic("note", f"graph_config.nodes.{name}.prompt",
                                        f"placeholder {{{key}}} assumed to be a source column"))

    budget = graph.settings.loop_budget or 4 * max(1, len(nodes))
    compiled = CompiledGraph(nodes, edges, entry, budget, graph.settings)
    diags.extend(validate_cycles(compiled))
    if any(d.is_error for d in diags):
        raise CompileError(diags)
    compiled.notes = diags
    return compiled


def validate_cycles(g: CompiledGraph) -> list[Diagnostic]:
    """Reject cycles made only of simple edges; note router cycles and their bound."""
    diags: list[Diagnostic] = []
    reported: set[frozenset] = set()
    for start in g.nodes:
        path, seen = [], {}
        node = start
        while node in g.edges and not g.edges[node].conditional and node not in seen:
            seen[node] = len(path)
            path.append(node)
            node = g.edges[node].target
        if node in seen:
            cycle = path[seen[node]:]
            key = frozenset(cycle)
            if key not in reported:
                reported.add(key)
                diags.append(Diagnostic("error", f"graph_config.nodes.{cycle[0]}",
                                        "unconditional cycle " + " -> ".join(cycle + [cycle[0]])))
    adj = {n: r.successors() for n, r in g.edges.items()}
    for name, route in g.edges.items():
        if route.conditional and name in _reachable(route.successors(), adj):
            diags.append(Diagnostic("note", f"graph_config.nodes.{name}",
                                    f"cycle through router {route.router_name} bounded by loop_budget {g.loop_budget}"))
    return diags
