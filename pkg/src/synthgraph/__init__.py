"""YAML-defined graph pipelines for synthetic SFT/DPO data generation."""

from __future__ import annotations

from .config import ConfigError, PipelineConfig, parse_pipeline_config
from .compiler import CompiledGraph, CompileError, compile_graph
from .engine import RunOptions, RunReport, load_task, resume, run

__version__ = "0.1.0"

__all__ = [
    "CompileError", "CompiledGraph", "ConfigError", "PipelineConfig", "RunOptions", "RunReport",
    "compile_graph", "load_task", "parse_pipeline_config", "resume", "run",
]
