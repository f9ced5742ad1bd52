"""Record sources, declarative transforms and sinks.

Records are plain dicts. Every loaded record carries a stable ``__index``
ordinal (its row position in the source) which the engine uses as record
identity for checkpointing.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator

from .config import FILE_FORMATS, SinkSpec, SourceSpec, TransformSpec

log = logging.getLogger(__name__)

INDEX = "__index"
Record = dict


class DataError(Exception):
    pass


class SourceNotFound(DataError):
    pass


class ReservedFieldError(DataError):
    pass


class SinkError(DataError):
    pass


@dataclass
class RowDecodeError:
    ordinal: int
    message: str

    def __str__(self) -> str:
        return f"row {self.ordinal}: {self.message}"


class RecordStream:
    """Single-use iterator over records; decode failures collect in ``errors``."""

    def __init__(self, rows: Iterable[Record]):
        self._it = iter(rows)
        self.errors: list[RowDecodeError] = []

    def __iter__(self) -> Iterator[Record]:
        return self

    def __next__(self) -> Record:
        return next(self._it)


# --------------------------------------------------------------------------
# sources


def _with_index(ordinal: int, row: Any, errors: list[RowDecodeError]) -> Record | None:
    if not isinstance(row, dict):
        errors.append(RowDecodeError(ordinal, f"expected an object, got {type(row).__name__}"))
        return None
    if INDEX in row:
        raise ReservedFieldError(f"source column {INDEX!r} collides with the reserved record index")
    out = {INDEX: ordinal}
    out.update(row)
    return out


def _rows_jsonl(path: Path, errors) -> Iterator[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        ordinal = 0
        for line in fh:
            if not line.strip():
                continue
            try:
                yield ordinal, json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(RowDecodeError(ordinal, str(exc)))
            ordinal += 1


def _rows_json(path: Path, errors) -> Iterator[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    yield from enumerate(data)


def _rows_csv(path: Path, errors) -> Iterator[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        for ordinal, row in enumerate(reader):
            if len(row) != len(header):
                errors.append(RowDecodeError(ordinal, f"expected {len(header)} fields, got {len(row)}"))
                continue
            yield ordinal, dict(zip(header, row))


def _rows_parquet(path: Path, errors) -> Iterator[tuple[int, Any]]:
    import pyarrow.parquet as pq

    ordinal = 0
    for batch in pq.ParquetFile(path).iter_batches():
        for row in batch.to_pylist():
            yield ordinal, row
            ordinal += 1


_READERS = {"jsonl": _rows_jsonl, "json": _rows_json, "csv": _rows_csv, "parquet": _rows_parquet}


def _format_for(path: Path) -> str | None:
    ext = path.suffix.lstrip(".").lower()
    return ext if ext in FILE_FORMATS else None


def hf_mirror_files(spec: SourceSpec, mirror: Path) -> list[Path]:
    """Local files standing in for a hub dataset: ``<mirror>/<repo_id>[/<config>]/<split>.<fmt>``."""
    root = mirror / spec.repo_id
    if spec.config_name and (root / spec.config_name).is_dir():
        root = root / spec.config_name
    if not root.is_dir():
        raise SourceNotFound(f"no local mirror for {spec.repo_id!r} under {mirror}")
    candidates = sorted(p for p in root.iterdir() if p.is_file() and _format_for(p))
    if spec.split:
        chosen = []
        for split in spec.split:
            found = [p for p in candidates if p.stem == split or p.stem.startswith(f"{split}-")]
            if not found:
                raise SourceNotFound(f"split {split!r} missing in mirror {root}")
            chosen.extend(found)
        return chosen
    if not candidates:
        raise SourceNotFound(f"mirror {root} holds no data files")
    return candidates


def open_source(spec: SourceSpec | None, base_dir: str | Path = ".", hf_mirror: str | Path | None = None) -> RecordStream:
    """Open a record stream. ``None`` or kind ``none`` yields nothing (data-less)."""
    if spec is None or spec.kind == "none":
        return RecordStream(())
    base = Path(base_dir)
    if spec.kind == "disk":
        path = Path(spec.file_path)
        if not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise SourceNotFound(f"source file {path} not found")
        files = [(path, spec.file_format)]
    elif spec.kind == "hf":
        mirror = Path(hf_mirror) if hf_mirror else base / "hf_mirror"
        files = [(p, _format_for(p)) for p in hf_mirror_files(spec, mirror)]
    else:
        raise DataError(f"unknown source kind {spec.kind!r}")

    stream = RecordStream(())

    def gen() -> Iterator[Record]:
        offset = 0
        for path, fmt in files:
            count = 0
            for ordinal, row in _READERS[fmt](path, stream.errors):
                count = ordinal + 1
                rec = _with_index(offset + ordinal, row, stream.errors)
                if rec is not None:
                    yield rec
            offset += count

    if spec.streaming:
        stream._it = gen()
    else:
        stream._it = iter(list(gen()))
    return stream


def peek_columns(spec: SourceSpec | None, base_dir=".", hf_mirror=None) -> set[str] | None:
    """Column names of the first record, or None if the source can't be read."""
    if spec is None or spec.kind == "none":
        return set()
    try:
        first = next(iter(open_source(SourceSpec(**{**spec.__dict__, "streaming": True}), base_dir, hf_mirror)), None)
    except (DataError, OSError, ValueError):
        return None
    return set(first) if first is not None else None


# --------------------------------------------------------------------------
# transforms


def apply_rename(r: Record, mapping: dict[str, str], overwrite: bool = False) -> Record:
    out = dict(r)
    for old, new in mapping.items():
        if old not in out:
            log.warning("rename: field %r not present in record %s", old, r.get(INDEX))
            continue
        if old == new:
            continue
        if new in out and not overwrite:
            log.warning("rename: %r already exists, leaving %r in place (overwrite disabled)", new, old)
            continue
        value = out.pop(old)
        out[new] = value
    return out


def _merge(window: list[Record], strategies: dict[str, dict]) -> Record:
    keys: list[str] = []
    for rec in window:
        for k in rec:
            if k not in keys:
                keys.append(k)
    out = {}
    for k in keys:
        strat = strategies.get(k, {"strategy": "first"})
        present = [rec[k] for rec in window if k in rec]
        if strat["strategy"] == "join":
            out[k] = strat.get("delimiter", "\n").join(str(v) for v in present)
        elif strat["strategy"] == "last":
            out[k] = present[-1]
        else:
            out[k] = present[0]
    return out


def apply_combine(stream: Iterable[Record], num_records: int, shift: int = 1,
                  field_strategies: dict[str, Any] | None = None) -> Iterator[Record]:
    """Merge sliding windows of ``num_records`` records, advancing by ``shift``.

    Fields without a strategy keep the first record's value; a trailing
    partial window is dropped.
    """
    if num_records < 2 or shift < 1:
        raise ValueError("num_records must be >= 2 and shift >= 1")
    strategies = {k: (v if isinstance(v, dict) else {"strategy": v}) for k, v in (field_strategies or {}).items()}
    buf: deque[Record] = deque()
    to_drop = 0
    for rec in stream:
        if to_drop:
            to_drop -= 1
            continue
        buf.append(rec)
        if len(buf) == num_records:
            yield _merge(list(buf), strategies)
            for _ in range(min(shift, len(buf))):
                buf.popleft()
            to_drop = max(0, shift - num_records)


def apply_skip(stream: Iterable[Record], from_start: int = 0, from_end: int = 0) -> Iterator[Record]:
    if from_start < 0 or from_end < 0:
        raise ValueError("skip counts must be >= 0")
    tail: deque[Record] = deque()
    for i, rec in enumerate(stream):
        if i < from_start:
            continue
        tail.append(rec)
        if len(tail) > from_end:
            yield tail.popleft()


def _renamed(stream: Iterable[Record], mapping: dict[str, str], overwrite: bool) -> Iterator[Record]:
    for r in stream:
        yield apply_rename(r, mapping, overwrite)


def apply_transforms(stream: Iterable[Record], transforms: list[TransformSpec]) -> Iterator[Record]:
    out: Iterable[Record] = stream
    for t in transforms:
        p = t.params
        if t.kind == "rename_fields":
            out = _renamed(out, p["mapping"], p.get("overwrite", False))
        elif t.kind == "skip_records":
            out = apply_skip(out, p.get("from_start", 0), p.get("from_end", 0))
        elif t.kind == "combine_records":
            if "skip" in p:
                out = apply_skip(out, p["skip"].get("from_start", 0), p["skip"].get("from_end", 0))
            out = apply_combine(out, p["num_records"], p.get("shift", 1), p.get("field_strategies"))
        else:
            raise DataError(f"unknown transform {t.kind!r}")
    return iter(out)


# --------------------------------------------------------------------------
# sinks


def dumps_record(record: Record) -> str:
    return json.dumps(record, ensure_ascii=False, default=str)


@dataclass
class SinkReport:
    path: str
    written: int = 0
    skipped: int = 0


class JsonlAppender:
    """Append-only JSONL writer whose byte position can be checkpointed."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def write(self, record: Record) -> None:
        try:
            self._fh.write((dumps_record(record) + "\n").encode("utf-8"))
        except OSError as exc:
            raise SinkError(f"write to {self.path} failed: {exc}") from exc

    def sync(self) -> int:
        """Flush to disk and return the durable byte position."""
        try:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            return self._fh.tell()
        except OSError as exc:
            raise SinkError(f"flush of {self.path} failed: {exc}") from exc

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    @staticmethod
    def truncate(path: str | Path, position: int) -> None:
        path = Path(path)
        if path.exists() and path.stat().st_size > position:
            with open(path, "r+b") as fh:
                fh.truncate(position)


def read_jsonl(path: str | Path) -> list[Record]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def sink_path(spec: SinkSpec, base_dir: str | Path = ".", hf_mirror: str | Path | None = None) -> tuple[Path, str]:
    if spec.kind == "hf":
        root = Path(hf_mirror) if hf_mirror else Path(base_dir) / "hf_mirror"
        root = root / str(spec.repo_id)
        if spec.config_name:
            root = root / spec.config_name
        return root / f"{spec.split or 'train'}.jsonl", "jsonl"
    path = Path(spec.file_path)
    if not path.is_absolute():
        path = Path(base_dir) / path
    return path, spec.file_format or _format_for(path) or "jsonl"


def write_sink(spec: SinkSpec, records: Iterable[Record], base_dir: str | Path = ".",
               hf_mirror: str | Path | None = None, append: bool = False) -> SinkReport:
    """Write records in arrival order to the sink's local destination.

    JSONL sinks support ``append``; other formats are written whole.
    """
    if spec.push_to_hub:
        log.warning("hub push disabled: writing %s locally only", spec.repo_id or spec.file_path)
    path, fmt = sink_path(spec, base_dir, hf_mirror)
    report = SinkReport(str(path))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "jsonl":
            with open(path, "a" if append else "w", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(dumps_record(rec) + "\n")
                    report.written += 1
            return report
        rows = list(records)
        report.written = len(rows)
        if fmt == "json":
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(rows, fh, ensure_ascii=False, default=str)
        elif fmt == "csv":
            cols: list[str] = []
            for r in rows:
                cols.extend(k for k in r if k not in cols)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for r in rows:
                    w.writerow({k: (json.dumps(v) if isinstance(v, (dict, list)) else v) for k, v in r.items()})
        elif fmt == "parquet":
            import pyarrow as pa
            import pyarrow.parquet as pq

            pq.write_table(pa.Table.from_pylist(rows), path)
        else:
            raise SinkError(f"unsupported sink format {fmt!r}")
    except OSError as exc:
        raise SinkError(f"writing {path} failed: {exc}") from exc
    return report
