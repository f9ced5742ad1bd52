"""Two-stage quality tagging: cheap text heuristics, then an LLM judge.

The judge only sees records that raised no heuristic flag. Tagging never
filters; it attaches a report under ``quality`` and leaves the decision to
whatever consumes the verdicts.
"""

from __future__ import annotations

import asyncio
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

from .backends import Backend, BackendError, ChatMessage, ChatRequest, complete_structured
from .config import QualityConfig

log = logging.getLogger(__name__)

FLAGS = ("too_short", "too_long", "high_repetition", "empty_turn", "refusal_phrase", "non_utf8_artifact")
MOJIBAKE = ("�", "Ã©", "Ã¨", "â€™", "â€œ", "â€", "Ã¶", "Ã¼")

RUBRIC = """You are grading one assistant conversation for use as training data.
Rate it from 1 (unusable) to 5 (excellent), considering:
- helpfulness: does the assistant address what the user asked?
- correctness: is the content accurate and free of errors?
- format: is the answer clear, well structured and complete?
Reply with JSON: {"score": <number 1-5>, "rationale": "<one or two sentences>"}."""

JUDGE_SCHEMA = {
    "type": "object",
    "properties": {"score": {"type": "number"}, "rationale": {"type": "string"}},
    "required": ["score", "rationale"],
}


@dataclass
class QualityReport:
    heuristic_flags: set[str] = field(default_factory=set)
    llm_score: float | None = None
    llm_rationale: str | None = None
    verdict: str = "review"  # keep | drop | review

    def to_json(self) -> dict:
        return {"heuristic_flags": sorted(self.heuristic_flags), "llm_score": self.llm_score,
                "llm_rationale": self.llm_rationale, "verdict": self.verdict}


class JudgeError(Exception):
    pass


def _turns(conversation: Any) -> list[dict]:
    if isinstance(conversation, str):
        return [{"role": "assistant", "content": conversation}]
    if isinstance(conversation, dict):
        return [conversation]
    return [t for t in (conversation or []) if isinstance(t, dict)]


def _content(turn: dict) -> str:
    c = turn.get("content", turn.get("text", ""))
    if isinstance(c, list):
        return "".join(p.get("text", "") for p in c if isinstance(p, dict))
    return "" if c is None else str(c)


def repetition_ratio(text: str, n: int = 4) -> float:
    """Share of the most frequent word n-gram among all n-grams."""
    words = text.split()
    grams = [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]
    if not grams:
        return 0.0
    return Counter(grams).most_common(1)[0][1] / len(grams)


def heuristic_stage(conversation: Any, rules: QualityConfig | None = None) -> set[str]:
    rules = rules or QualityConfig()
    flags: set[str] = set()
    turns = _turns(conversation)
    if not turns:
        return {"empty_turn"}
    for t in turns:
        text = _content(t)
        if not text.strip():
            flags.add("empty_turn")
            continue
        if any(m in text for m in MOJIBAKE):
            flags.add("non_utf8_artifact")
        if t.get("role") != "assistant":
            continue
        if len(text) < rules.min_chars:
            flags.add("too_short")
        if len(text) > rules.max_chars:
            flags.add("too_long")
        if repetition_ratio(text, rules.ngram) > rules.repetition_threshold:
            flags.add("high_repetition")
        low = text.lower()
        if any(p in low for p in rules.refusal_phrases):
            flags.add("refusal_phrase")
    return flags


@dataclass
class JudgeResult:
    score: float
    rationale: str
    clamped: bool = False


def _transcript(conversation: Any) -> str:
    return "\n\n".join(f"[{t.get('role', 'assistant')}]\n{_content(t)}" for t in _turns(conversation))


async def judge_stage(conversation: Any, config: QualityConfig, backend: Backend) -> JudgeResult:
    req = ChatRequest(config.judge_model, [
        ChatMessage.text("system", RUBRIC),
        ChatMessage.text("user", "Conversation to grade:\n\n" + _transcript(conversation)),
    ], dict(config.judge_parameters))
    try:
        result = await complete_structured(backend, req, JUDGE_SCHEMA)
    except BackendError as exc:
        raise JudgeError(str(exc)) from exc
    score = float(result.value["score"])
    clamped = min(5.0, max(1.0, score))
    if clamped != score:
        log.warning("judge score %s outside [1, 5]; clamped to %s", score, clamped)
    return JudgeResult(clamped, str(result.value.get("rationale", "")), clamped != score)


async def tag_record(record: dict, config: QualityConfig, backend: Backend | None,
                     conversation: Any = None) -> dict:
    """Attach a ``quality`` report. ``conversation`` stands in when the record lacks the configured key."""
    report = QualityReport()
    if config.conversation_key in record:
        conversation = record[config.conversation_key]
    elif "messages" in record:
        conversation = record["messages"]
    try:
        report.heuristic_flags = heuristic_stage(conversation, config)
        if report.heuristic_flags:
            hard = report.heuristic_flags & set(config.hard_flags)
            report.verdict = "drop" if hard else "review"
        elif backend is None:
            report.verdict = "review"
        else:
            judged = await judge_stage(conversation, config, backend)
            report.llm_score = judged.score
            report.llm_rationale = judged.rationale
            report.verdict = "keep" if judged.score >= config.threshold else "drop"
    except Exception as exc:  # noqa: BLE001 - a failure must never silently keep or drop
        log.warning("quality tagging failed: %s", exc)
        report.verdict = "review"
    out = dict(record)
    out["quality"] = report.to_json()
    return out


async def tag_records(records: list[dict], config: QualityConfig, backend: Backend | None,
                      concurrency: int = 8) -> list[dict]:
    sem = asyncio.Semaphore(max(1, concurrency))

    async def one(r):
        async with sem:
            return await tag_record(r, config, backend)

    return list(await asyncio.gather(*(one(r) for r in records)))
