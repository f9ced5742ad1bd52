from __future__ import annotations

import csv
import json
import logging

import pyarrow.parquet as pq
import pytest
from hypothesis import given, strategies as st

from synthgraph.config import SinkSpec, SourceSpec, TransformSpec
from synthgraph.dataio import (
    INDEX, JsonlAppender, ReservedFieldError, SourceNotFound, apply_combine, apply_rename, apply_skip,
    apply_transforms, open_source, read_jsonl, write_sink,
)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_jsonl_indices(tmp_path):
    write_jsonl(tmp_path / "a.jsonl", [{"x": 1}, {"x": 2}, {"x": 3}])
    recs = list(open_source(SourceSpec("disk", "a.jsonl", "jsonl"), tmp_path))
    assert [r[INDEX] for r in recs] == [0, 1, 2]
    assert [r["x"] for r in recs] == [1, 2, 3]


def test_csv_against_stdlib_reader(tmp_path):
    (tmp_path / "t.csv").write_text('a,b\n1,"x, y"\n2,z\n')
    ours = [{k: v for k, v in r.items() if k != INDEX} for r in open_source(SourceSpec("disk", "t.csv", "csv"), tmp_path)]
    with open(tmp_path / "t.csv", newline="") as fh:
        oracle = list(csv.DictReader(fh))
    assert ours == oracle
    assert all(isinstance(v, str) for r in ours for v in r.values())


def test_malformed_rows_are_counted(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"x": 1}\nnot json\n[1]\n{"x": 4}\n')
    stream = open_source(SourceSpec("disk", "a.jsonl", "jsonl", streaming=True), tmp_path)
    recs = list(stream)
    assert [r[INDEX] for r in recs] == [0, 3]
    assert [e.ordinal for e in stream.errors] == [1, 2]


def test_missing_source_and_reserved_field(tmp_path):
    with pytest.raises(SourceNotFound):
        open_source(SourceSpec("disk", "nope.jsonl", "jsonl"), tmp_path)
    write_jsonl(tmp_path / "r.jsonl", [{INDEX: 5}])
    with pytest.raises(ReservedFieldError):
        list(open_source(SourceSpec("disk", "r.jsonl", "jsonl"), tmp_path))


def test_dataless_source_is_empty():
    assert list(open_source(None)) == []
    assert list(open_source(SourceSpec("none"))) == []


def test_hf_mirror(tmp_path):
    d = tmp_path / "mirror" / "org" / "ds" / "cfg"
    d.mkdir(parents=True)
    write_jsonl(d / "train.jsonl", [{"a": 1}])
    write_jsonl(d / "test.jsonl", [{"a": 2}])
    spec = SourceSpec("hf", repo_id="org/ds", config_name="cfg", split=["test"])
    assert [r["a"] for r in open_source(spec, tmp_path, tmp_path / "mirror")] == [2]


def test_rename_documented_example():
    r = {"page": 1, "llm_extract": "t", "type": "md"}
    out = apply_rename(r, {"page": "id", "llm_extract": "text", "type": "text_format"})
    assert out == {"id": 1, "text": "t", "text_format": "md"}
    assert apply_rename(r, {}) == r


@pytest.mark.parametrize("b_exists,overwrite,expected", [
    (False, False, {"b": 1}),
    (False, True, {"b": 1}),
    (True, False, {"a": 1, "b": 2}),
    (True, True, {"b": 1}),
])
def test_rename_cases(b_exists, overwrite, expected, caplog):
    r = {"a": 1, **({"b": 2} if b_exists else {})}
    with caplog.at_level(logging.WARNING):
        assert apply_rename(r, {"a": "b"}, overwrite) == expected
    assert bool(caplog.records) == (b_exists and not overwrite)


def test_combine_windows():
    recs = [{"t": "A"}, {"t": "B"}, {"t": "C"}]
    assert list(apply_combine(recs, 2, 1, {"t": {"strategy": "join", "delimiter": "\n"}})) == [
        {"t": "A\nB"}, {"t": "B\nC"}]
    four = [{"t": c} for c in "ABCD"]
    assert list(apply_combine(four, 2, 2, {"t": "last"})) == [{"t": "B"}, {"t": "D"}]
    assert list(apply_combine([{"t": "A"}], 2)) == []


def test_combine_unlisted_fields_take_first():
    out = list(apply_combine([{"id": 1, "t": "a"}, {"id": 2, "t": "b"}], 2, 1, {"t": "join"}))
    assert out == [{"id": 1, "t": "a\nb"}]


def test_skip_documented_example():
    recs = [{INDEX: i} for i in range(30)]
    assert [r[INDEX] for r in apply_skip(recs, 10, 10)] == list(range(10, 20))
    assert list(apply_skip(recs[:5], 3, 3)) == []
    assert list(apply_skip(recs, 0, 0)) == recs


@given(st.integers(0, 40), st.integers(0, 20), st.integers(0, 20))
def test_skip_count_property(n, a, b):
    assert len(list(apply_skip(({"i": i} for i in range(n)), a, b))) == max(0, n - a - b)


@given(st.lists(st.text(alphabet="abc", min_size=1, max_size=3), max_size=20), st.integers(2, 4))
def test_combine_partition_property(values, k):
    recs = [{"t": v} for v in values]
    out = list(apply_combine(recs, k, k, {"t": {"strategy": "join", "delimiter": "|"}}))
    joined = [piece for r in out for piece in r["t"].split("|")]
    assert joined == values[: len(values) // k * k]


def test_transform_pipeline_is_pure():
    recs = [{INDEX: i, "old": i} for i in range(10)]
    ts = [TransformSpec("rename_fields", {"mapping": {"old": "new"}}),
          TransformSpec("skip_records", {"from_start": 2, "from_end": 3})]
    a = list(apply_transforms(iter(recs), ts))
    b = list(apply_transforms(iter(recs), ts))
    assert a == b and [r["new"] for r in a] == [2, 3, 4, 5, 6]


RECS = [{"id": 1, "text": "a"}, {"id": 2, "text": "b"}, {"id": 3, "text": "ü"}]


def test_jsonl_sink_stable(tmp_path):
    rep = write_sink(SinkSpec("disk", "o/out.jsonl", "jsonl"), RECS, tmp_path)
    lines = (tmp_path / "o/out.jsonl").read_text(encoding="utf-8").splitlines()
    assert rep.written == 3 and len(lines) == 3
    assert lines[0] == '{"id": 1, "text": "a"}'


@pytest.mark.parametrize("fmt", ["parquet", "json", "csv"])
def test_sink_round_trip(tmp_path, fmt):
    write_sink(SinkSpec("disk", f"out.{fmt}", fmt), RECS, tmp_path)
    if fmt == "parquet":
        assert pq.read_table(tmp_path / "out.parquet").to_pylist() == RECS
    back = [{k: v for k, v in r.items() if k != INDEX}
            for r in open_source(SourceSpec("disk", f"out.{fmt}", fmt), tmp_path)]
    if fmt == "csv":
        back = [{"id": int(r["id"]), "text": r["text"]} for r in back]
    assert back == RECS


def test_hub_sink_writes_locally(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        rep = write_sink(SinkSpec("hf", repo_id="me/ds", config_name="c", split="train", push_to_hub=True),
                         RECS, tmp_path, tmp_path / "mirror")
    assert "hub push disabled" in caplog.text
    assert read_jsonl(rep.path) == RECS


def test_appender_truncate(tmp_path):
    p = tmp_path / "o.jsonl"
    w = JsonlAppender(p)
    w.write(RECS[0])
    pos = w.sync()
    w.write(RECS[1])
    w.sync()
    w.close()
    JsonlAppender.truncate(p, pos)
    assert read_jsonl(p) == [RECS[0]]
