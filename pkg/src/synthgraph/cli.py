"""Command line entry point.

    synthgraph [run] --task NAME [--dry-run True] [--oasst True] [--quality True] ...
    synthgraph resume --task NAME
    synthgraph bench --records 200 --latency-ms 50 --calls 2 --concurrency 8

Boolean flags take an explicit ``True``/``False`` token or work as bare
switches. Exit codes: 0 success, 1 run error, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import textwrap
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .backends import BackendPool, BackendConfig, Backoff, MockBackend
from .compiler import CompileError
from .config import ConfigError, Diagnostic
from .dataio import DataError
from .engine import EngineError, RunOptions, load_task, run

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("synthgraph")


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected True or False, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 2, same as argparse, but always with usage text
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _flag(p: argparse.ArgumentParser, name: str, help: str) -> None:
    p.add_argument(name, type=parse_bool, nargs="?", const=True, default=False, metavar="BOOL", help=help)


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", help="task name (tasks/<name>/config.yaml) or task directory")
    p.add_argument("--config", help="explicit config file path")
    p.add_argument("--tasks-dir", default="tasks", help="where task names are looked up (default: ./tasks)")
    _flag(p, "--resume", "resume from the run directory's checkpoint")
    _flag(p, "--oasst", "export oasst.jsonl / sft.jsonl / dpo.jsonl")
    _flag(p, "--quality", "attach heuristic + judge quality reports")
    _flag(p, "--sequential", "process one record at a time")
    _flag(p, "--dry-run", "parse and compile only; print diagnostics")
    _flag(p, "--retry-failed", "on resume, reprocess records that failed before")
    _flag(p, "--force-resume", "resume even if the config changed")
    _flag(p, "--mock", "route every model name to the deterministic mock backend")
    p.add_argument("--concurrency", type=int, default=8)
    p.add_argument("--checkpoint-every", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--num-records", type=int, default=1, help="records to synthesize in data-less mode")
    p.add_argument("--mock-latency-ms", type=float, default=0.0)
    p.add_argument("--models", help="models file (default: <task dir>/models.yaml)")
    p.add_argument("--hf-mirror", help="local directory standing in for hub datasets")
    p.add_argument("--run-dir", help="run directory (default: <task dir>/run)")
    p.add_argument("--json", action="store_true", help="print a machine-readable report on stdout")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synthgraph", description="Run YAML-defined synthetic data graphs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    _run_args(sub.add_parser("run", help="execute a task (default)"))
    _run_args(sub.add_parser("resume", help="resume a task from its checkpoint"))
    b = sub.add_parser("bench", help="sequential vs concurrent timing on a synthetic mock pipeline")
    b.add_argument("--records", type=int, default=200)
    b.add_argument("--latency-ms", type=float, default=50.0)
    b.add_argument("--calls", type=int, default=2)
    b.add_argument("--concurrency", type=int, default=8)
    b.add_argument("--json", action="store_true")
    return p


def resolve_task_config(args) -> Path:
    if args.config:
        return Path(args.config)
    if not args.task:
        raise ConfigError([Diagnostic("ERROR", "<cli>", "one of --task or --config is required")])
    direct = Path(args.task)
    for cand in (direct if direct.is_file() else None, direct / "config.yaml",
                 Path(args.tasks_dir) / args.task / "config.yaml"):
        if cand is not None and cand.is_file():
            return cand
    raise ConfigError([Diagnostic("ERROR", "<cli>", f"task {args.task!r} not found (looked for {direct}/config.yaml "
                                                     f"and {args.tasks_dir}/{args.task}/config.yaml)")])


def _print_diagnostics(diags: list[Diagnostic]) -> None:
    for d in diags:
        print(str(d), file=sys.stderr)


def _cmd_run(args, resume: bool) -> int:
    try:
        config_path = resolve_task_config(args)
        task = load_task(config_path, models_path=args.models, mock=args.mock,
                         mock_latency_ms=args.mock_latency_ms, hf_mirror=args.hf_mirror)
    except (ConfigError, CompileError) as exc:
        _print_diagnostics(exc.diagnostics)
        if args.json:
            print(json.dumps({"status": "invalid", "diagnostics": [str(d) for d in exc.diagnostics]}))
        return EXIT_CONFIG
    except OSError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        _print_diagnostics(task.diagnostics)
        if args.json:
            print(json.dumps({"status": "valid", "diagnostics": [str(d) for d in task.diagnostics]}))
        else:
            print("valid")
        return EXIT_OK
    run_dir = Path(args.run_dir) if args.run_dir else config_path.parent / "run"
    opts = RunOptions(concurrency=args.concurrency, checkpoint_every=args.checkpoint_every, limit=args.limit,
                      sequential=args.sequential, seed=args.seed, num_records=args.num_records,
                      resume=resume or args.resume, force_resume=args.force_resume,
                      retry_failed=args.retry_failed, oasst=args.oasst, quality=args.quality)
    try:
        report = run(task, run_dir, opts)
    except (EngineError, DataError, OSError) as exc:
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc)}))
        return EXIT_RUN
    summary = report.summary()
    if args.json:
        print(json.dumps({"status": "interrupted" if report.interrupted else "ok", **summary}, default=str))
    else:
        print(f"run {report.run_id}: processed {report.processed}, succeeded {report.succeeded}, "
              f"failed {report.failed}, skipped {report.skipped} in {report.wall_s:.2f}s -> {run_dir}")
    return EXIT_RUN if report.interrupted else EXIT_OK


# --------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    records: int
    latency_ms: float
    calls_per_record: int
    concurrency: int
    sequential_s: float
    concurrent_s: float
    speedup: float
    oracle_s: float  # max(R*C*L/k, C*L)
    sequential_oracle_s: float  # R*C*L

    @property
    def oracle_ratio(self) -> float:
        return self.concurrent_s / self.oracle_s if self.oracle_s else float("inf")


def bench_config(calls_per_record: int) -> str:
    nodes, edges = [], ["  - from: START", "    to: step0"]
    for i in range(calls_per_record):
        nodes.append(textwrap.dedent(f"""\
            step{i}:
              node_type: llm
              prompt:
                - user: "step {i} for record {{__index}}"
              model:
                name: mock
            """))
        nxt = f"step{i + 1}" if i + 1 < calls_per_record else "END"
        edges += [f"  - from: step{i}", f"    to: {nxt}"]
    node_block = textwrap.indent("".join(nodes), "    ")
    return ("data_config:\n  sink:\n    type: jsonl\n    file_path: out.jsonl\n"
            "graph_config:\n  nodes:\n" + node_block + "  edges:\n" + "\n".join(f"  {e}" for e in edges) + "\n"
            "output_config:\n  output_map:\n    id:\n      from: __index\n"
            f"    answer:\n      from: step{calls_per_record - 1}\n")


def bench(records: int = 200, latency_ms: float = 50.0, calls_per_record: int = 2, concurrency: int = 8) -> BenchReport:
    """Time the same synthetic mock pipeline sequentially and with ``concurrency`` workers."""
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.yaml"
        cfg_path.write_text(bench_config(max(1, calls_per_record)), encoding="utf-8")
        times = {}
        for label, sequential in (("sequential", True), ("concurrent", False)):
            backend = MockBackend(BackendConfig(name="mock", api_style="mock", backoff=Backoff(0, 1, 0),
                                                max_in_flight=max(concurrency, 1) * max(calls_per_record, 1),
                                                mock_latency_ms=latency_ms))
            task = load_task(cfg_path, backends=BackendPool(fallback=backend))
            opts = RunOptions(concurrency=concurrency, sequential=sequential, num_records=records,
                              checkpoint_every=max(records, 1), export_sink=False, seed=0)
            start = time.perf_counter()
            run(task, Path(tmp) / f"run-{label}", opts)
            times[label] = time.perf_counter() - start
    L = latency_ms / 1000.0
    oracle = max(records * calls_per_record * L / max(concurrency, 1), calls_per_record * L)
    seq, conc = times["sequential"], times["concurrent"]
    return BenchReport(records, latency_ms, calls_per_record, concurrency, seq, conc,
                       seq / conc if conc > 0 else float("inf"), oracle, records * calls_per_record * L)


def _cmd_bench(args) -> int:
    rep = bench(args.records, args.latency_ms, args.calls, args.concurrency)
    if args.json:
        print(json.dumps(asdict(rep) | {"oracle_ratio": rep.oracle_ratio}))
    else:
        print(f"sequential {rep.sequential_s:.2f}s (model {rep.sequential_oracle_s:.2f}s)  "
              f"concurrent k={rep.concurrency} {rep.concurrent_s:.2f}s (model {rep.oracle_s:.2f}s)  "
              f"speedup {rep.speedup:.2f}x")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("run", "resume", "bench", "-h", "--help"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "bench":
        return _cmd_bench(args)
    return _cmd_run(args, resume=args.command == "resume")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
