"""Callables shipped with the package and registered under their dotted names."""

from __future__ import annotations

import ast
import operator
import re
from typing import Any

from pydantic import BaseModel, field_validator

_FENCE = re.compile(r"^```[a-zA-Z0-9_+-]*\n(.*?)\n?```\s*$", re.S)


def strip_code_fence(text: str) -> str:
    m = _FENCE.match(text.strip())
    return m.group(1) if m else text


def check_validity(values) -> dict:
    """Mark ``solution`` valid when it parses as Python source."""
    code = strip_code_fence(str(values.get("solution", "")))
    if not code.strip():
        return {"is_valid": False}
    try:
        compile(code, "<solution>", "exec")
    except (SyntaxError, ValueError):
        return {"is_valid": False}
    return {"is_valid": True}


class RouteBasedOnValidity:
    @staticmethod
    def apply(values) -> str:
        return "END" if values.get("is_valid") else "generate"


_OPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
    ast.Pow: operator.pow, ast.Mod: operator.mod, ast.FloorDiv: operator.floordiv,
    ast.USub: operator.neg, ast.UAdd: operator.pos,
}


def _arith(node):
    if isinstance(node, ast.Expression):
        return _arith(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_arith(node.left), _arith(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_arith(node.operand))
    raise ValueError("only arithmetic expressions are supported")


def calculate(expression: str) -> str:
    """Evaluate an arithmetic expression."""
    return str(_arith(ast.parse(expression, mode="eval")))


def search(query: str) -> str:
    """Search a reference corpus for a query."""
    # offline stand-in: callers needing real search register their own tool
    return f"No indexed documents matched {query!r}."


class CustomUserSchema(BaseModel):
    id: int
    conversation: list[dict[str, Any]]

    @field_validator("id")
    @classmethod
    def six_digits(cls, v: int) -> int:
        if v <= 99999:
            raise ValueError("id must have at least 6 digits")
        return v


def route_strategy(values) -> str:
    return str(values.get("evolution_strategy", "depth"))


def collect_evolved(values) -> dict:
    strategy = route_strategy(values)
    return {"evolved_instruction": values.get(f"{strategy}_evolved", values.get("instruction"))}


def route_judgment(values) -> str:
    verdict = values.get("judgment_passed")
    return "pass" if verdict in (True, "true", "pass", "yes") else "fail"


def install(reg) -> None:
    reg.register("validators.code.check_validity", check_validity)
    reg.register("validators.code.RouteBasedOnValidity", RouteBasedOnValidity)
    reg.register("validators.custom_schemas.CustomUserSchema", CustomUserSchema)
    reg.register("tasks.sim.tools.search_tool.search", search)
    reg.register("tasks.sim.tools.calculator_tool.calculate", calculate)
    reg.register("recipes.evolve_instruct.route_strategy", route_strategy)
    reg.register("recipes.evolve_instruct.collect", collect_evolved)
    reg.register("recipes.evolve_instruct.route_judgment", route_judgment)
