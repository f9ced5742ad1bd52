"""Concurrent, checkpointed execution of a compiled graph over a record stream.

Run directory layout::

    manifest.json     run identity, config hash, seed, counters
    checkpoint.json   completed / failed record ids and the durable output offset
    output.jsonl      output records in completion order (append-only)
    failures.jsonl    one line per failed or schema-skipped record
    run.log           log of the run

Records are identified by their source ``__index`` (or a generated counter
in data-less mode). A checkpoint only lists records whose output lines were
fsynced before it was written; on resume the output file is truncated back
to the checkpointed offset so every record id appears exactly once.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import os
import signal
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterator

import yaml

from .backends import Backend, BackendPool, BackendConfig, MockBackend, Backoff
from .compiler import CompiledGraph, CompileError, SubgraphLibrary, compile_graph
from .config import END, START, ConfigError, Diagnostic, PipelineConfig, parse_pipeline_config
from .dataio import INDEX, JsonlAppender, SinkError, apply_transforms, open_source, peek_columns, read_jsonl, write_sink
from .output import OutputMappingError, build_record, validate_record
from .registry import Registry, default_registry
from .runtime import NodeFailure, NodeRuntime, RecordState

log = logging.getLogger(__name__)

SEED_ENV = "GRASP_RUN_SEED"


class EngineError(Exception):
    pass


class RoutingError(EngineError):
    def __init__(self, node: str, label: Any):
        self.node = node
        super().__init__(f"router after {node} returned unknown label {label!r}")


class LoopBudgetExceeded(EngineError):
    def __init__(self, node: str, budget: int):
        self.node = node
        self.budget = budget
        super().__init__(f"record exceeded loop budget of {budget} node executions before {node}")


class ResumeError(EngineError):
    pass


# --------------------------------------------------------------------------
# task loading


@dataclass
class Task:
    config: PipelineConfig
    compiled: CompiledGraph
    registry: Registry
    backends: BackendPool
    base_dir: Path
    hf_mirror: Path | None = None
    diagnostics: list[Diagnostic] = field(default_factory=list)


def load_backends(models_path: Path | None, mock: bool = False, mock_latency_ms: float = 0.0) -> BackendPool:
    if mock:
        cfg = BackendConfig(name="mock", api_style="mock", backoff=Backoff(0, 1, 0), mock_latency_ms=mock_latency_ms)
        return BackendPool(fallback=MockBackend(cfg))
    if models_path is None or not models_path.is_file():
        return BackendPool()
    try:
        data = yaml.safe_load(models_path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValueError("expected a mapping of model name to backend settings")
        return BackendPool.from_mapping(data)
    except (yaml.YAMLError, ValueError, TypeError) as exc:
        raise ConfigError([Diagnostic("ERROR", str(models_path), str(exc))]) from exc


def load_task(config_path: str | Path, registry: Registry | None = None, backends: BackendPool | None = None,
              models_path: str | Path | None = None, mock: bool = False, mock_latency_ms: float = 0.0,
              hf_mirror: str | Path | None = None, subgraph_dirs: list[str | Path] | None = None) -> Task:
    """Parse, compile and bind a task file. Raises ConfigError / CompileError."""
    path = Path(config_path)
    config = parse_pipeline_config(path.read_bytes())
    base_dir = path.parent
    registry = registry or default_registry()
    if backends is None:
        models = Path(models_path) if models_path else base_dir / "models.yaml"
        backends = load_backends(models, mock, mock_latency_ms)
    mirror = Path(hf_mirror) if hf_mirror else (base_dir / "hf_mirror")
    columns = peek_columns(config.source, base_dir, mirror)
    if columns is not None and config.data and config.data.transforms and config.source is not None:
        try:
            first = next(apply_transforms(open_source(config.source, base_dir, mirror), config.data.transforms), None)
            columns = set(first) if first is not None else None
        except Exception:  # noqa: BLE001 - fall back to unverified placeholders
            columns = None
    library = SubgraphLibrary((subgraph_dirs or []) + [base_dir / "graphs"])
    compiled = compile_graph(config.graph, registry, library, source_columns=columns, model_names=backends.names())
    return Task(config, compiled, registry, backends, base_dir, mirror, config.diagnostics + compiled.notes)


# --------------------------------------------------------------------------
# routing and per-record traversal


def route(g: CompiledGraph, node: str, state: RecordState) -> str:
    """Next node after ``node`` (START allowed); conditional edges ask their router."""
    r = g.route_of(node)
    if not r.conditional:
        return r.target
    label = r.router(MappingProxyType(state.values))
    if isinstance(label, bool):
        label = str(label).lower()
    target = r.path_map.get(str(label))
    if target is None:
        raise RoutingError(node, label)
    return target


async def process_record(g: CompiledGraph, runtime: NodeRuntime, state: RecordState) -> RecordState:
    current = START
    while True:
        nxt = route(g, current, state)
        if nxt == END:
            return state
        if state.total_executions >= g.loop_budget:
            raise LoopBudgetExceeded(nxt, g.loop_budget)
        await runtime.execute(g.nodes[nxt], state)
        current = nxt


# --------------------------------------------------------------------------
# manifest / checkpoint


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    run_seed: int
    started_at: str
    flags: dict[str, bool] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=lambda: {"processed": 0, "succeeded": 0, "failed": 0, "skipped": 0})


@dataclass
class Checkpoint:
    manifest: RunManifest
    completed: set = field(default_factory=set)
    failed: dict = field(default_factory=dict)  # record_id -> failure entry
    skipped: dict = field(default_factory=dict)  # record_id -> schema failure entry
    sink_positions: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "manifest": asdict(self.manifest),
            "completed": sorted(self.completed, key=_id_key),
            "failed": [self.failed[k] for k in sorted(self.failed, key=_id_key)],
            "skipped": [self.skipped[k] for k in sorted(self.skipped, key=_id_key)],
            "sink_positions": self.sink_positions,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Checkpoint":
        return cls(
            manifest=RunManifest(**d["manifest"]),
            completed=set(d.get("completed", [])),
            failed={e["record_id"]: e for e in d.get("failed", [])},
            skipped={e["record_id"]: e for e in d.get("skipped", [])},
            sink_positions=dict(d.get("sink_positions", {})),
        )


def _id_key(v: Any):
    return (0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v))


def atomic_write_json(path: Path, data: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, ensure_ascii=False, default=str)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(run_dir: Path) -> Checkpoint:
    path = run_dir / "checkpoint.json"
    if not path.is_file():
        raise ResumeError(f"no checkpoint found in {run_dir}")
    try:
        return Checkpoint.from_json(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise ResumeError(f"corrupt checkpoint {path}: {exc}") from exc


# --------------------------------------------------------------------------
# run


@dataclass
class RunOptions:
    concurrency: int = 8
    checkpoint_every: int = 50
    limit: int | None = None
    sequential: bool = False
    seed: int | None = None
    num_records: int = 1
    resume: bool = False
    force_resume: bool = False
    retry_failed: bool = False
    oasst: bool = False
    quality: bool = False
    keep_states: bool = False
    export_sink: bool = True


@dataclass
class RunReport:
    run_id: str
    run_dir: str
    processed: int = 0
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    written: int = 0
    wall_s: float = 0.0
    interrupted: bool = False
    failures: list[dict] = field(default_factory=list)
    states: dict[Any, RecordState] = field(default_factory=dict, repr=False)
    exports: dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "states"} | {"states": len(self.states)}


def failure_entry(record_id: Any, node: str | None, error_kind: str, message: str, attempts: int = 1) -> dict:
    return {"record_id": record_id, "node": node, "error_kind": error_kind, "message": message, "attempts": attempts}


def trace_failures(report: RunReport, path: str | Path | None = None) -> list[dict]:
    """Failure log entries for a finished run, written as JSONL when ``path`` is given."""
    entries = sorted(report.failures, key=lambda e: _id_key(e["record_id"]))
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in entries:
                fh.write(json.dumps(e, ensure_ascii=False, default=str) + "\n")
    return entries


def _source_records(task: Task, options: RunOptions) -> Iterator[dict]:
    cfg = task.config
    if cfg.source is None:
        records: Iterator[dict] = ({INDEX: i} for i in range(options.num_records))
    else:
        stream = open_source(cfg.source, task.base_dir, task.hf_mirror)
        records = apply_transforms(stream, cfg.data.transforms if cfg.data else [])
    if options.limit is not None:
        records = itertools.islice(records, options.limit)
    return records


def resolve_seed(explicit: int | None) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else 0


class _Run:
    def __init__(self, task: Task, run_dir: Path, options: RunOptions):
        self.task = task
        self.run_dir = run_dir
        self.options = options
        self.stop = asyncio.Event()
        self.fatal: BaseException | None = None
        self.since_checkpoint = 0
        self.pending_completed: list = []
        self.pending_failed: dict = {}
        self.pending_skipped: dict = {}

    def _prepare(self) -> None:
        opts, task = self.options, self.task
        self.run_dir.mkdir(parents=True, exist_ok=True)
        config_hash = task.config.config_hash()
        out_path = self.run_dir / "output.jsonl"
        if opts.resume:
            ckpt = load_checkpoint(self.run_dir)
            if ckpt.manifest.config_hash != config_hash:
                msg = (f"config-hash mismatch: checkpoint {ckpt.manifest.config_hash[:12]} "
                       f"vs current {config_hash[:12]}")
                if not opts.force_resume:
                    raise ResumeError(msg)
                log.warning("%s; resuming anyway (--force-resume)", msg)
                ckpt.manifest.config_hash = config_hash
            JsonlAppender.truncate(out_path, ckpt.sink_positions.get("output.jsonl", 0))
            if opts.retry_failed:
                ckpt.failed.clear()
                self.retry_ids = None
            self.ckpt = ckpt
        else:
            for name in ("output.jsonl", "failures.jsonl", "checkpoint.json"):
                p = self.run_dir / name
                if p.exists():
                    p.unlink()
            manifest = RunManifest(
                run_id=uuid.uuid4().hex[:12], config_hash=config_hash, run_seed=resolve_seed(opts.seed),
                started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                flags={"oasst": opts.oasst, "quality": opts.quality, "sequential": opts.sequential},
            )
            self.ckpt = Checkpoint(manifest)
        self.out = JsonlAppender(out_path)
        self.ckpt.sink_positions["output.jsonl"] = self.out.sync()
        atomic_write_json(self.run_dir / "manifest.json", asdict(self.ckpt.manifest))
        self.report = RunReport(self.ckpt.manifest.run_id, str(self.run_dir))
        self.runtime = NodeRuntime(task.backends, task.compiled.settings, self.ckpt.manifest.run_seed, task.base_dir)
        self.judge: Backend | None = None
        if opts.quality:
            q = task.config.quality
            try:
                self.judge = task.backends.get(q.judge_model if q else "judge")
            except KeyError:
                log.warning("no backend for the quality judge; judged records will be marked review")

    def checkpoint(self) -> None:
        """Sync output, then atomically publish everything written so far."""
        position = self.out.sync()
        self.ckpt.completed.update(self.pending_completed)
        self.ckpt.failed.update(self.pending_failed)
        self.ckpt.skipped.update(self.pending_skipped)
        self.pending_completed, self.pending_failed, self.pending_skipped = [], {}, {}
        self.ckpt.sink_positions["output.jsonl"] = position
        m = self.ckpt.manifest
        m.counters = {"processed": len(self.ckpt.completed) + len(self.ckpt.failed),
                      "succeeded": len(self.ckpt.completed) - len(self.ckpt.skipped),
                      "failed": len(self.ckpt.failed), "skipped": len(self.ckpt.skipped)}
        try:
            atomic_write_json(self.run_dir / "checkpoint.json", self.ckpt.to_json())
            atomic_write_json(self.run_dir / "manifest.json", asdict(m))
        except OSError as exc:
            raise SinkError(f"checkpoint write failed: {exc}") from exc
        self.since_checkpoint = 0

    def _skip(self, rid: Any) -> bool:
        if rid in self.ckpt.completed:
            return True
        return rid in self.ckpt.failed

    async def _handle(self, rec: dict) -> None:
        task, opts, report = self.task, self.options, self.report
        rid = rec.get(INDEX)
        state = RecordState(rid, rec)
        entry = None
        out_record = None
        try:
            await process_record(task.compiled, self.runtime, state)
            out_record = build_record(state, task.config.output, task.config, task.registry)
            verdict = validate_record(out_record, task.config.schema, task.registry)
            if not verdict.valid:
                entry = failure_entry(rid, None, "schema", "; ".join(verdict.reasons))
                out_record = None
        except NodeFailure as exc:
            entry = failure_entry(rid, exc.node, exc.error_kind, str(exc.cause), exc.attempts)
            entry["failed"] = True
        except (RoutingError, LoopBudgetExceeded) as exc:
            entry = failure_entry(rid, exc.node, type(exc).__name__, str(exc))
            entry["failed"] = True
        except OutputMappingError as exc:
            entry = failure_entry(rid, None, "schema", f"output mapping: {exc}")
        except Exception as exc:  # noqa: BLE001 - router or hook bugs fail the record, not the run
            entry = failure_entry(rid, None, type(exc).__name__, str(exc))
            entry["failed"] = True
        if out_record is not None and opts.quality:
            from .quality import tag_record
            from .config import QualityConfig

            out_record = await tag_record(out_record, task.config.quality or QualityConfig(), self.judge,
                                          conversation=state.messages())

        # bookkeeping is synchronous so it is atomic with respect to other workers
        if opts.keep_states:
            report.states[rid] = state
        report.processed += 1
        if out_record is not None:
            self.out.write(out_record)
            report.succeeded += 1
            report.written += 1
            self.pending_completed.append(rid)
        elif entry.pop("failed", False):
            report.failed += 1
            self.pending_failed[rid] = entry
            log.info("record %s failed at %s: %s", rid, entry["node"], entry["message"])
        else:
            report.skipped += 1
            self.pending_completed.append(rid)
            self.pending_skipped[rid] = entry
            log.info("record %s skipped: %s", rid, entry["message"])
        self.since_checkpoint += 1
        if self.since_checkpoint >= max(1, opts.checkpoint_every):
            self.checkpoint()

    async def execute(self) -> RunReport:
        self._prepare()
        opts = self.options
        workers = 1 if opts.sequential else max(1, opts.concurrency)
        queue: asyncio.Queue = asyncio.Queue(maxsize=workers * 2)
        start = time.perf_counter()

        async def producer():
            try:
                for rec in _source_records(self.task, opts):
                    if self.stop.is_set():
                        break
                    if self._skip(rec.get(INDEX)):
                        continue
                    await queue.put(rec)
            except BaseException as exc:
                self.fatal = exc
                self.stop.set()
            finally:
                for _ in range(workers):
                    await queue.put(None)

        async def worker():
            while True:
                rec = await queue.get()
                if rec is None:
                    return
                if self.stop.is_set():
                    continue
                try:
                    await self._handle(rec)
                except Exception as exc:  # noqa: BLE001 - sink / checkpoint failure stops the run
                    self.fatal = exc
                    self.stop.set()

        loop = asyncio.get_running_loop()
        handled = []
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                try:
                    loop.add_signal_handler(sig, self._on_signal)
                    handled.append(sig)
                except (NotImplementedError, RuntimeError):
                    pass
        try:
            await asyncio.gather(producer(), *(worker() for _ in range(workers)))
        finally:
            for sig in handled:
                loop.remove_signal_handler(sig)
            try:
                self.checkpoint()
            except SinkError as exc:
                log.error("final checkpoint failed: %s", exc)
                self.fatal = self.fatal or exc
            self.out.close()
        self.report.wall_s = time.perf_counter() - start
        self.report.interrupted = self.stop.is_set()
        self.report.failures = list(self.ckpt.failed.values()) + list(self.ckpt.skipped.values())
        trace_failures(self.report, self.run_dir / "failures.jsonl")
        if self.fatal is not None:
            raise self.fatal
        if not self.report.interrupted:
            await self._finish()
        return self.report

    def _on_signal(self) -> None:
        log.warning("shutdown requested: draining in-flight records")
        self.stop.set()

    async def _finish(self) -> None:
        task, opts = self.task, self.options
        records = read_jsonl(self.run_dir / "output.jsonl")
        sink = task.config.sink
        if opts.export_sink and sink is not None:
            rep = write_sink(sink, records, task.base_dir, task.hf_mirror)
            self.report.exports["sink"] = {"path": rep.path, "written": rep.written}
        if opts.oasst:
            from . import oasst

            q = task.config.quality
            conv_key = q.conversation_key if q else "conversation"
            self.report.exports["oasst"] = oasst.export(records, self.run_dir, conv_key)


async def arun(task: Task, run_dir: str | Path, options: RunOptions | None = None) -> RunReport:
    return await _Run(task, Path(run_dir), options or RunOptions()).execute()


def run(task: Task, run_dir: str | Path, options: RunOptions | None = None) -> RunReport:
    """Run (or resume, with ``options.resume``) a task into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    prev_level = root.level
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    try:
        return asyncio.run(arun(task, run_dir, options))
    finally:
        root.removeHandler(handler)
        root.setLevel(prev_level)
        handler.close()


def resume(task: Task, run_dir: str | Path, options: RunOptions | None = None) -> RunReport:
    opts = options or RunOptions()
    opts.resume = True
    return run(task, run_dir, opts)


__all__ = [
    "Checkpoint", "CompileError", "ConfigError", "LoopBudgetExceeded", "ResumeError", "RoutingError", "RunManifest",
    "RunOptions", "RunReport", "Task", "arun", "load_task", "process_record", "resume", "route", "run",
    "trace_failures",
]
