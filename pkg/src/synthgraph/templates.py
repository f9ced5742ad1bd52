"""Placeholder templates: ``{name}`` substitution with ``{{``/``}}`` escapes."""

from __future__ import annotations

import json
import re
from typing import Any, Callable

_TOKEN = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")
_SOLE = re.compile(r"^\{([A-Za-z_][A-Za-z0-9_]*)\}$")


def placeholders(text: str) -> list[str]:
    """Names referenced by ``text`` in order of first appearance."""
    seen: list[str] = []
    for m in _TOKEN.finditer(text):
        name = m.group(1)
        if name and name not in seen:
            seen.append(name)
    return seen


def sole_placeholder(text: str) -> str | None:
    """Return the name if ``text`` is exactly one placeholder, else None."""
    m = _SOLE.match(text.strip())
    return m.group(1) if m else None


def to_text(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (dict, list)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def substitute(text: str, lookup: Callable[[str], Any]) -> str:
    """Replace placeholders using ``lookup``; it raises KeyError for missing names."""

    def repl(m: re.Match) -> str:
        tok = m.group(0)
        if tok == "{{":
            return "{"
        if tok == "}}":
            return "}"
        return to_text(lookup(m.group(1)))

    return _TOKEN.sub(repl, text)
