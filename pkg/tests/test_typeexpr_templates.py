from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from synthgraph.templates import placeholders, sole_placeholder, substitute, to_text
from synthgraph.typeexpr import TypeExpr, TypeExprError, matches, parse_type, to_json_schema


@pytest.mark.parametrize("text,expected", [
    ("int", "int"),
    ("list[dict[str, any]]", "list[dict[str, any]]"),
    ("list", "list[any]"),
    ("dict", "dict[str, any]"),
    ("string", "str"),
])
def test_parse_type(text, expected):
    assert str(parse_type(text)) == expected


@pytest.mark.parametrize("bad", ["", "integer", "list[int", "dict[str]", "list[int,str]", "int]"])
def test_parse_type_rejects(bad):
    with pytest.raises(TypeExprError):
        parse_type(bad)


def test_matches_excludes_bool_from_int():
    assert matches(3, parse_type("int"))
    assert not matches(True, parse_type("int"))
    assert matches(3, parse_type("float"))
    assert not matches("3", parse_type("float"))
    assert matches([{"role": "user", "content": 1}], parse_type("list[dict[str, any]]"))
    assert not matches([1, "a"], parse_type("list[str]"))


def test_json_schema():
    assert to_json_schema(parse_type("list[int]")) == {"type": "array", "items": {"type": "integer"}}
    assert to_json_schema(TypeExpr("any")) == {}


def test_placeholders_and_escapes():
    assert placeholders("{a} and {b} and {a} {{c}}") == ["a", "b"]
    assert substitute("{{x}} {x}", {"x": 1}.__getitem__) == "{x} 1"
    assert sole_placeholder(" {image} ") == "image"
    assert sole_placeholder("see {image}") is None
    assert to_text({"k": [1]}) == '{"k": [1]}'


def test_substitute_missing_raises():
    with pytest.raises(KeyError):
        substitute("{nope}", {}.__getitem__)


names = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True)
plain = st.text(alphabet=st.characters(blacklist_characters="{}"), max_size=10)


@given(st.lists(st.tuples(plain, names), max_size=5), plain)
def test_substitute_roundtrip(chunks, tail):
    text = "".join(f"{p}{{{n}}}" for p, n in chunks) + tail
    values = {n: f"<{n}>" for _, n in chunks}
    out = substitute(text, values.__getitem__)
    assert out == "".join(f"{p}<{n}>" for p, n in chunks) + tail
    assert placeholders(text) == list(dict.fromkeys(n for _, n in chunks))


@given(st.text(max_size=30))
def test_escaped_braces_are_literal(s):
    escaped = s.replace("{", "{{").replace("}", "}}")
    assert placeholders(escaped) == []
    assert substitute(escaped, {}.__getitem__) == s
