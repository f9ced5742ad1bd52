from __future__ import annotations

import pytest
import yaml
from hypothesis import HealthCheck, given, settings, strategies as st

from synthgraph.config import (
    ConfigError, NonScalarPath, PathNotFound, SchemaConfig, SchemaField, dump_pipeline_yaml,
    parse_pipeline_config, resolve_config_path, substitute_config_paths, validate_schema_rules,
)

from conftest import FIXTURE_TASKS, TASKS


def load(name: str):
    return parse_pipeline_config((TASKS / name / "config.yaml").read_text())


def errors_of(text: str) -> list[str]:
    with pytest.raises(ConfigError) as ei:
        parse_pipeline_config(text)
    return [d.message for d in ei.value.diagnostics if d.is_error]


def test_b1_dataless():
    cfg = load("b1_dataless")
    assert cfg.source is None
    assert cfg.sink.file_path == "output/synthetic_data.jsonl"
    assert cfg.sink.file_format == "jsonl"  # .jsonl path wins over type json
    assert list(cfg.graph.nodes) == ["generate"]
    assert cfg.graph.nodes["generate"].node_type == "llm"
    assert len(cfg.graph.edges) == 2
    # the misindented entry beside an empty output_map is folded in
    assert list(cfg.output.output_map) == ["fact"]
    assert cfg.output.output_map["fact"].operand == "response"
    assert any(d.level == "warning" for d in cfg.diagnostics)


def test_b2_conditional():
    cfg = load("b2_conditional")
    last = cfg.graph.edges[-1]
    assert last.condition == "validators.code.RouteBasedOnValidity"
    assert last.path_map == {"END": "END", "generate": "generate"}
    assert [f.name for f in cfg.schema.fields] == ["id", "solution", "validity"]


def test_b3_hub_keys_warn():
    cfg = load("b3_image")
    assert cfg.source.kind == "hf" and cfg.source.split == ["train"] and cfg.source.streaming
    warned = [d for d in cfg.diagnostics if "hub push disabled" in d.message]
    assert {d.path.rsplit(".", 1)[-1] for d in warned} == {"push_to_hub", "private", "token"}


def test_empty_input():
    assert "missing graph_config" in errors_of("")


def test_yaml_syntax_error_has_position():
    with pytest.raises(ConfigError) as ei:
        parse_pipeline_config("graph_config:\n  nodes: [a\n")
    (d,) = ei.value.diagnostics
    assert d.line is not None and d.column is not None


def test_both_to_and_condition():
    raw = yaml.safe_load((TASKS / "b2_conditional" / "config.yaml").read_text())
    raw["graph_config"]["edges"][2]["to"] = "END"
    assert "edge sets both to and condition" in errors_of(yaml.safe_dump(raw))


def test_unknown_node_type_and_unknown_top_key():
    raw = yaml.safe_load((TASKS / "b1_dataless" / "config.yaml").read_text())
    raw["graph_config"]["nodes"]["generate"]["node_type"] = "quantum"
    raw["extra_block"] = {}
    with pytest.raises(ConfigError) as ei:
        parse_pipeline_config(yaml.safe_dump(raw))
    assert any(d.level == "warning" and d.path.endswith("extra_block") for d in ei.value.diagnostics)
    assert any("quantum" in d.message for d in ei.value.diagnostics if d.is_error)


def test_dataless_requires_sink():
    raw = yaml.safe_load((TASKS / "b1_dataless" / "config.yaml").read_text())
    del raw["data_config"]
    assert any("data-less" in m for m in errors_of(yaml.safe_dump(raw)))


def test_errors_are_collected_not_fail_fast():
    raw = yaml.safe_load((TASKS / "b2_conditional" / "config.yaml").read_text())
    raw["graph_config"]["edges"][2]["to"] = "END"  # 1
    raw["schema_config"]["fields"][1]["is_greater_than"] = 3  # 2: numeric rule on str
    raw["graph_config"]["nodes"]["validate"]["node_type"] = "bogus"  # 3
    assert len(errors_of(yaml.safe_dump(raw))) >= 3


@pytest.mark.parametrize("name", FIXTURE_TASKS)
def test_round_trip(name):
    cfg = load(name)
    again = parse_pipeline_config(dump_pipeline_yaml(cfg))
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_config_hash_ignores_key_order():
    raw = yaml.safe_load((TASKS / "b2_conditional" / "config.yaml").read_text())
    reordered = dict(reversed(list(raw.items())))
    reordered["graph_config"] = dict(reversed(list(raw["graph_config"].items())))
    a = parse_pipeline_config(yaml.safe_dump(raw, sort_keys=False))
    b = parse_pipeline_config(yaml.safe_dump(reordered, sort_keys=False))
    assert a.config_hash() == b.config_hash()


def test_resolve_config_path():
    cfg = load("b4_audio")
    assert resolve_config_path(cfg, "$data_config.source.repo_id") == "datasets-examples/doc-audio-1"
    with pytest.raises(NonScalarPath):
        resolve_config_path(cfg, "$graph_config")
    with pytest.raises(PathNotFound) as ei:
        resolve_config_path(cfg, "$data_config.source.missing")
    assert ei.value.segment == "missing"
    assert substitute_config_paths(cfg, "from $data_config.source.repo_id") == "from datasets-examples/doc-audio-1"
    assert substitute_config_paths(cfg, "$data_config.source.streaming") is True


def test_schema_rule_compatibility():
    ok = SchemaConfig(fields=[SchemaField("id", "int", {"is_greater_than": 99999})])
    assert validate_schema_rules(ok) == []
    bad = validate_schema_rules(SchemaConfig(fields=[SchemaField("name", "str", {"is_greater_than": 3})]))
    assert len(bad) == 1 and "numeric rule" in bad[0].message
    assert len(validate_schema_rules(SchemaConfig(fields=[SchemaField("tags", "list[str]", {"regex": "x"})]))) == 1


# rule x type compatibility table, enumerated independently of the implementation
COMPAT = {
    "is_greater_than": {"int", "float"},
    "is_less_than": {"int", "float"},
    "regex": {"str"},
    "non_empty": {"str", "list[str]", "dict[str, any]"},
}
OPERAND = {"is_greater_than": 1, "is_less_than": 1, "regex": "a+", "non_empty": True}


@pytest.mark.parametrize("rule", sorted(COMPAT))
@pytest.mark.parametrize("type_", ["int", "float", "str", "bool", "list[str]", "dict[str, any]"])
def test_rule_type_table(rule, type_):
    diags = validate_schema_rules(SchemaConfig(fields=[SchemaField("f", type_, {rule: OPERAND[rule]})]))
    assert (diags == []) == (type_ in COMPAT[rule])


@settings(max_examples=200, suppress_health_check=[HealthCheck.too_slow])
@given(st.binary(max_size=300))
def test_parser_never_escapes_on_bytes(data):
    try:
        parse_pipeline_config(data)
    except ConfigError:
        pass


yaml_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=8),
    lambda kids: st.lists(kids, max_size=3) | st.dictionaries(st.text(max_size=8), kids, max_size=3),
    max_leaves=12,
)


@settings(max_examples=200, suppress_health_check=[HealthCheck.too_slow])
@given(st.dictionaries(st.sampled_from(["data_config", "graph_config", "output_config", "schema_config", "x"]),
                       yaml_values, max_size=5))
def test_parser_never_escapes_on_structures(doc):
    try:
        parse_pipeline_config(yaml.safe_dump(doc))
    except ConfigError:
        pass
