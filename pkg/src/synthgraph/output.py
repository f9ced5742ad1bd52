"""Turn finished record states into output records and validate them."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

from .config import OutputConfig, PathNotFound, NonScalarPath, PipelineConfig, SchemaConfig, substitute_config_paths
from .registry import Registry, UnresolvedName, as_callable
from .runtime import RecordState
from .typeexpr import TypeExprError, matches, parse_type

# state keys that resolve to derived values when no node wrote them
DERIVED_KEYS = ("messages", "__record_id")


class OutputMappingError(Exception):
    pass


@dataclass
class Validation:
    valid: bool
    reasons: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.valid


def _state_value(state: RecordState, key: str) -> Any:
    if key in state.values:
        return state.values[key]
    if key == "messages":
        return state.messages()
    if key == "__record_id":
        return state.record_id
    raise OutputMappingError(f"state has no value {key!r}")


def build_record(state: RecordState, output: OutputConfig, pipeline: PipelineConfig | dict | None = None,
                 registry: Registry | None = None) -> dict:
    """Assemble the output record in ``output_map`` declaration order.

    With an empty output_map every non-internal state value is emitted.
    """
    if not output.output_map:
        record = {k: v for k, v in state.values.items() if not k.startswith("__")}
    else:
        record = {}
        for name, f in output.output_map.items():
            if f.kind == "from":
                record[name] = _state_value(state, f.operand)
            elif f.kind == "value":
                v = f.operand
                if isinstance(v, str) and pipeline is not None:
                    try:
                        v = substitute_config_paths(pipeline, v)
                    except (PathNotFound, NonScalarPath) as exc:
                        raise OutputMappingError(f"{name}: {exc}") from exc
                record[name] = v
            else:
                fn = _resolve(registry, f.operand)
                try:
                    record[name] = fn(dict(state.values))
                except Exception as exc:  # noqa: BLE001
                    raise OutputMappingError(f"{name}: transform {f.operand} failed: {exc}") from exc
    if output.generator:
        gen = _resolve(registry, output.generator, method="generate")
        try:
            record = gen(state, record, pipeline)
        except Exception as exc:  # noqa: BLE001
            raise OutputMappingError(f"generator {output.generator} failed: {exc}") from exc
        if not isinstance(record, dict):
            raise OutputMappingError(f"generator {output.generator} returned {type(record).__name__}")
    return record


def _resolve(registry: Registry | None, name: str, method: str = "apply"):
    if registry is None:
        raise OutputMappingError(f"no registry to resolve {name!r}")
    try:
        return as_callable(registry.resolve(name), method)
    except (UnresolvedName, TypeError) as exc:
        raise OutputMappingError(str(exc)) from exc


def _show(v: Any) -> str:
    return repr(v) if isinstance(v, str) else str(v)


def validate_record(record: dict, schema: SchemaConfig | None, registry: Registry | None = None) -> Validation:
    """Type then rule checks for each declared field; every failure is reported."""
    if schema is None:
        return Validation(True)
    if schema.schema_ref:
        return _validate_with_class(record, schema.schema_ref, registry)
    reasons: list[str] = []
    for f in schema.fields:
        if f.name not in record:
            reasons.append(f"{f.name}: missing")
            continue
        value = record[f.name]
        try:
            t = parse_type(f.type)
        except TypeExprError as exc:
            reasons.append(f"{f.name}: {exc}")
            continue
        if not matches(value, t):
            reasons.append(f"{f.name}: expected {t}")
            continue
        for rule, operand in f.rules.items():
            if rule == "is_greater_than" and not value > operand:
                reasons.append(f"{f.name}: {_show(value)} not > {operand}")
            elif rule == "is_less_than" and not value < operand:
                reasons.append(f"{f.name}: {_show(value)} not < {operand}")
            elif rule == "regex" and re.fullmatch(operand, value) is None:
                reasons.append(f"{f.name}: {_show(value)} does not match {operand!r}")
            elif rule == "non_empty" and operand and len(value) == 0:
                reasons.append(f"{f.name}: empty")
    return Validation(not reasons, reasons)


def _validate_with_class(record: dict, name: str, registry: Registry | None) -> Validation:
    if registry is None:
        return Validation(False, [f"no registry to resolve {name!r}"])
    try:
        obj = registry.resolve(name)
    except UnresolvedName as exc:
        return Validation(False, [str(exc)])
    if hasattr(obj, "model_validate"):
        try:
            obj.model_validate(record)
        except Exception as exc:  # noqa: BLE001 - pydantic ValidationError or a validator raising
            errors = getattr(exc, "errors", None)
            if callable(errors):
                return Validation(False, [
                    f"{'.'.join(str(p) for p in e.get('loc', ())) or '<record>'}: {e.get('msg')}" for e in errors()
                ])
            return Validation(False, [str(exc)])
        return Validation(True)
    fn = as_callable(obj, "validate")
    try:
        result = fn(record)
    except Exception as exc:  # noqa: BLE001
        return Validation(False, [str(exc)])
    if result is True or result is None:
        return Validation(True)
    if result is False:
        return Validation(False, [f"rejected by {name}"])
    reasons = [str(r) for r in result]
    return Validation(not reasons, reasons)
