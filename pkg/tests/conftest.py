from __future__ import annotations

import asyncio
import shutil
from pathlib import Path

import pytest

from synthgraph.backends import BackendPool, MockBackend
from synthgraph.engine import load_task

FIXTURES = Path(__file__).parent / "fixtures"
TASKS = FIXTURES / "tasks"

FIXTURE_TASKS = ["b1_dataless", "b2_conditional", "b3_image", "b4_audio",
                 "snippet_agent", "snippet_structured", "snippet_audio"]


def run_async(coro):
    return asyncio.run(coro)


@pytest.fixture
def task_copy(tmp_path):
    """Copy a fixture task (plus the shared mirror) into tmp so sinks land there."""

    def make(name: str) -> Path:
        shutil.copytree(TASKS / "shared_mirror", tmp_path / "shared_mirror", dirs_exist_ok=True)
        dest = tmp_path / name
        shutil.copytree(TASKS / name, dest)
        return dest

    return make


def mock_task(task_dir: Path, mock: MockBackend | None = None, **kw):
    mock = mock or MockBackend()
    task = load_task(task_dir / "config.yaml", backends=BackendPool(fallback=mock),
                     hf_mirror=task_dir.parent / "shared_mirror", **kw)
    return task, mock


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
