"""Field type expressions such as ``int`` or ``list[dict[str, any]]``.

Used by schema validation of output records and by structured-output
schemas, which are converted to JSON schema documents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

SCALARS = {"str", "int", "float", "bool", "any"}
NUMERIC = {"int", "float"}


class TypeExprError(ValueError):
    pass


@dataclass(frozen=True)
class TypeExpr:
    name: str
    args: tuple["TypeExpr", ...] = ()

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}[{', '.join(str(a) for a in self.args)}]"


def parse_type(text: str) -> TypeExpr:
    """Parse a type expression, raising TypeExprError on malformed input."""
    if not isinstance(text, str):
        raise TypeExprError(f"type must be a string, got {type(text).__name__}")
    expr, rest = _parse(text.replace(" ", ""))
    if rest:
        raise TypeExprError(f"trailing text in type {text!r}")
    return expr


def _parse(s: str) -> tuple[TypeExpr, str]:
    i = 0
    while i < len(s) and (s[i].isalnum() or s[i] == "_"):
        i += 1
    name = s[:i].lower()
    if name == "string":
        name = "str"
    if name in SCALARS and (i >= len(s) or s[i] != "["):
        return TypeExpr(name), s[i:]
    if name not in ("list", "dict"):
        raise TypeExprError(f"unknown type {s[:i] or s!r}")
    if i >= len(s) or s[i] != "[":
        # bare list / dict means any contents
        if name == "list":
            return TypeExpr("list", (TypeExpr("any"),)), s[i:]
        return TypeExpr("dict", (TypeExpr("str"), TypeExpr("any"))), s[i:]
    rest = s[i + 1:]
    args = []
    while True:
        arg, rest = _parse(rest)
        args.append(arg)
        if rest.startswith(","):
            rest = rest[1:]
            continue
        if rest.startswith("]"):
            rest = rest[1:]
            break
        raise TypeExprError(f"expected ',' or ']' in type near {rest!r}")
    if name == "list" and len(args) != 1:
        raise TypeExprError("list takes exactly one type argument")
    if name == "dict" and len(args) != 2:
        raise TypeExprError("dict takes exactly two type arguments")
    return TypeExpr(name, tuple(args)), rest


def matches(value: Any, t: TypeExpr) -> bool:
    if t.name == "any":
        return True
    if t.name == "str":
        return isinstance(value, str)
    if t.name == "bool":
        return isinstance(value, bool)
    if t.name == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if t.name == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if t.name == "list":
        return isinstance(value, (list, tuple)) and all(matches(v, t.args[0]) for v in value)
    if t.name == "dict":
        return isinstance(value, dict) and all(
            matches(k, t.args[0]) and matches(v, t.args[1]) for k, v in value.items()
        )
    return False


def to_json_schema(t: TypeExpr) -> dict:
    if t.name == "any":
        return {}
    if t.name in ("str", "int", "float", "bool"):
        return {"type": {"str": "string", "int": "integer", "float": "number", "bool": "boolean"}[t.name]}
    if t.name == "list":
        return {"type": "array", "items": to_json_schema(t.args[0])}
    return {"type": "object", "additionalProperties": to_json_schema(t.args[1])}
