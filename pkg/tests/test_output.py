from __future__ import annotations

import textwrap

import pytest
from hypothesis import given, strategies as st

from synthgraph.config import OutputConfig, OutputField, SchemaConfig, SchemaField, parse_pipeline_config
from synthgraph.output import OutputMappingError, build_record, validate_record
from synthgraph.registry import default_registry
from synthgraph.runtime import RecordState

PIPE = parse_pipeline_config(textwrap.dedent("""\
    data_config:
      source: {type: hf, repo_id: org/ds, split: train}
    graph_config:
      nodes:
        a: {node_type: lambda, lambda: x.y, output_keys: [k]}
      edges:
        - {from: START, to: a}
        - {from: a, to: END}
    output_config:
      output_map:
        k: {from: k}
"""))


def omap(**fields) -> OutputConfig:
    return OutputConfig({n: OutputField(n, kind, op) for n, (kind, op) in fields.items()})


def test_from_value_and_order():
    state = RecordState(3, {"answer": "42", "q": "why"})
    rec = build_record(state, omap(z=("from", "answer"), a=("value", "fixed"), m=("from", "q")))
    assert list(rec) == ["z", "a", "m"] and rec == {"z": "42", "a": "fixed", "m": "why"}


def test_value_config_path():
    rec = build_record(RecordState(0), omap(src=("value", "$data_config.source.repo_id"),
                                           tag=("value", "from $data_config.source.split")), PIPE)
    assert rec == {"src": "org/ds", "tag": "from train"}
    with pytest.raises(OutputMappingError):
        build_record(RecordState(0), omap(x=("value", "$data_config.nope")), PIPE)


def test_from_missing_and_derived_keys():
    with pytest.raises(OutputMappingError):
        build_record(RecordState(0), omap(x=("from", "absent")))
    rec = build_record(RecordState(9), omap(i=("from", "__record_id"), m=("from", "messages")))
    assert rec == {"i": 9, "m": []}


def test_transform_and_failure():
    reg = default_registry()
    reg.register("t.upper", lambda v: v["q"].upper())
    reg.register("t.bad", lambda v: v["nope"])
    assert build_record(RecordState(0, {"q": "hi"}), omap(u=("transform", "t.upper")), registry=reg) == {"u": "HI"}
    with pytest.raises(OutputMappingError):
        build_record(RecordState(0, {"q": "hi"}), omap(u=("transform", "t.bad")), registry=reg)


def test_empty_map_emits_public_state():
    assert build_record(RecordState(0, {"a": 1, "__index": 0}), OutputConfig()) == {"a": 1}


def test_generator_postprocesses():
    reg = default_registry()

    class Gen:
        @staticmethod
        def generate(state, record, pipeline):
            return {**record, "n": len(state.values)}

    reg.register("t.gen", Gen)
    cfg = omap(a=("from", "a"))
    cfg.generator = "t.gen"
    assert build_record(RecordState(0, {"a": 1, "b": 2}), cfg, registry=reg) == {"a": 1, "n": 2}


SCHEMA = SchemaConfig(fields=[
    SchemaField("id", "int", {"is_greater_than": 99999}),
    SchemaField("name", "str", {"regex": "[a-z]+", "non_empty": True}),
    SchemaField("score", "float", {"is_less_than": 1.0}),
])


def test_validate_reports_every_reason():
    assert validate_record({"id": 123456, "name": "abc", "score": 0.5}, SCHEMA).valid
    v = validate_record({"id": 12, "name": "ABC", "score": 2.0}, SCHEMA)
    assert not v and len(v.reasons) == 3
    assert v.reasons[0] == "id: 12 not > 99999"
    v = validate_record({"id": "x"}, SCHEMA)
    assert v.reasons == ["id: expected int", "name: missing", "score: missing"]


def test_validate_no_schema_is_valid():
    assert validate_record({"anything": 1}, None)


def test_custom_schema_class():
    schema = SchemaConfig(schema_ref="validators.custom_schemas.CustomUserSchema")
    reg = default_registry()
    assert validate_record({"id": 123456, "conversation": []}, schema, reg)
    bad = validate_record({"id": 5, "conversation": []}, schema, reg)
    assert not bad and bad.reasons[0].startswith("id:")
    assert not validate_record({"id": 123456}, schema, reg)


@given(st.integers(-10**9, 10**9))
def test_threshold_rule_matches_comparison(n):
    v = validate_record({"id": n, "name": "a", "score": 0.0}, SCHEMA)
    assert v.valid == (n > 99999)
