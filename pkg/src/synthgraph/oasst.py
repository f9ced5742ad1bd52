"""OASST-style conversation trees and SFT/DPO example extraction.

Message ids are digests of the tree id plus the role/text path from the
root, so two conversations sharing a prefix produce the same ids for the
shared messages. That makes merging a union of message sets.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

log = logging.getLogger(__name__)

_ROLE_MAP = {"user": "prompter", "prompter": "prompter", "human": "prompter", "assistant": "assistant"}


class ConversionError(ValueError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"message {index}: {message}")


class MergeError(ValueError):
    pass


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:32]


@dataclass
class OasstMessage:
    message_id: str
    parent_id: str | None
    role: str  # prompter | assistant
    text: str
    tree_id: str
    lang: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"message_id": self.message_id, "parent_id": self.parent_id, "tree_id": self.tree_id,
                "role": self.role, "text": self.text, "lang": self.lang, "metadata": self.metadata}


@dataclass
class OasstTree:
    tree_id: str
    messages: dict[str, OasstMessage]

    @property
    def root(self) -> OasstMessage:
        roots = [m for m in self.messages.values() if m.parent_id is None]
        if len(roots) != 1:
            raise ValueError(f"tree {self.tree_id} has {len(roots)} roots")
        return roots[0]

    def children(self, message_id: str) -> list[OasstMessage]:
        return sorted((m for m in self.messages.values() if m.parent_id == message_id), key=lambda m: m.message_id)

    def path_to(self, message_id: str) -> list[OasstMessage]:
        path = []
        cur: str | None = message_id
        while cur is not None:
            m = self.messages[cur]
            path.append(m)
            cur = m.parent_id
        return path[::-1]

    def walk(self) -> Iterable[OasstMessage]:
        """Depth-first, siblings ordered by message_id."""
        stack = [self.root]
        while stack:
            m = stack.pop()
            yield m
            stack.extend(reversed(self.children(m.message_id)))


def _text_of(content: Any) -> str:
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict) and p.get("type", "text") == "text")
    return "" if content is None else str(content)


def to_tree(conversation: list[dict], metadata: dict | None = None, lang: str | None = None) -> OasstTree:
    """Linear chain tree from ``[{role, content}, ...]``; system turns go to root metadata."""
    system: list[str] = []
    turns: list[tuple[int, str, str]] = []
    for i, msg in enumerate(conversation):
        role = msg.get("role")
        if role == "system":
            if turns:
                raise ConversionError(i, "system message after the conversation started")
            system.append(_text_of(msg.get("content")))
            continue
        mapped = _ROLE_MAP.get(role)
        if mapped is None:
            raise ConversionError(i, f"unsupported role {role!r}")
        expected = "prompter" if not turns or turns[-1][1] == "assistant" else "assistant"
        if mapped != expected:
            raise ConversionError(i, f"expected {expected} turn, got {mapped}")
        turns.append((i, mapped, _text_of(msg.get("content"))))
    if not turns:
        raise ConversionError(0, "conversation has no prompter turn")
    tree_id = _digest("tree", "\n".join(system), turns[0][2])
    messages: dict[str, OasstMessage] = {}
    parent = None
    path: list[str] = [tree_id]
    for _, role, text in turns:
        path += [role, text]
        mid = _digest(*path)
        messages[mid] = OasstMessage(mid, parent, role, text, tree_id, lang)
        parent = mid
    root = messages[next(iter(messages))]
    if system:
        root.metadata["system"] = "\n".join(system)
    last = messages[parent]
    last.metadata.update(metadata or {})
    return OasstTree(tree_id, messages)


def merge_trees(trees: list[OasstTree]) -> OasstTree:
    """Unify shared prefixes; divergent turns become siblings."""
    if not trees:
        raise MergeError("nothing to merge")
    tree_id = trees[0].tree_id
    root_key = (trees[0].root.text, trees[0].root.metadata.get("system"))
    merged: dict[str, OasstMessage] = {}
    for t in trees:
        if t.tree_id != tree_id or (t.root.text, t.root.metadata.get("system")) != root_key:
            raise MergeError(f"trees have different roots: {trees[0].root.text[:40]!r} vs {t.root.text[:40]!r}")
        for mid, m in t.messages.items():
            if mid in merged:
                for k, v in m.metadata.items():
                    merged[mid].metadata.setdefault(k, v)
            else:
                merged[mid] = OasstMessage(m.message_id, m.parent_id, m.role, m.text, m.tree_id, m.lang, dict(m.metadata))
    return OasstTree(tree_id, merged)


@dataclass
class TreeStats:
    depth: int
    message_count: int
    branching: int  # messages with two or more children


def tree_stats(tree: OasstTree) -> TreeStats:
    depth_of: dict[str, int] = {}
    for m in tree.walk():
        depth_of[m.message_id] = 1 if m.parent_id is None else depth_of[m.parent_id] + 1
    child_counts: dict[str, int] = {}
    for m in tree.messages.values():
        if m.parent_id is not None:
            child_counts[m.parent_id] = child_counts.get(m.parent_id, 0) + 1
    return TreeStats(max(depth_of.values()), len(tree.messages), sum(1 for c in child_counts.values() if c >= 2))


def check_alternation(tree: OasstTree) -> bool:
    if tree.root.role != "prompter":
        return False
    for m in tree.messages.values():
        if m.parent_id is not None and tree.messages[m.parent_id].role == m.role:
            return False
    return True


def _chat(tree: OasstTree, path: list[OasstMessage]) -> list[dict]:
    out = []
    system = tree.root.metadata.get("system")
    if system:
        out.append({"role": "system", "content": system})
    out.extend({"role": "user" if m.role == "prompter" else "assistant", "content": m.text} for m in path)
    return out


def extract_sft(tree: OasstTree) -> list[dict]:
    """One example per assistant message: the path to its parent plus its text."""
    examples = []
    for m in tree.walk():
        if m.role != "assistant":
            continue
        context = tree.path_to(m.parent_id)
        examples.append({"tree_id": tree.tree_id, "message_id": m.message_id,
                         "messages": _chat(tree, context), "target": m.text})
    return examples


def _score(m: OasstMessage, key: str) -> float | None:
    cur: Any = m.metadata
    for part in key.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    if isinstance(cur, bool) or not isinstance(cur, (int, float)):
        return None
    return float(cur)


@dataclass
class PreferencePair:
    context: list[OasstMessage]
    chosen: OasstMessage
    rejected: OasstMessage

    def to_json(self, tree: OasstTree) -> dict:
        return {"tree_id": tree.tree_id, "prompt": _chat(tree, self.context),
                "chosen": self.chosen.text, "rejected": self.rejected.text,
                "chosen_id": self.chosen.message_id, "rejected_id": self.rejected.message_id}


def extract_dpo(tree: OasstTree, quality_key: str = "quality") -> list[PreferencePair]:
    """Best-vs-each pairs among scored assistant siblings; ties are skipped."""
    pairs = []
    for m in tree.walk():
        if m.role != "prompter":
            continue
        kids = [c for c in tree.children(m.message_id) if c.role == "assistant"]
        if len(kids) < 2:
            continue
        scores = [_score(c, quality_key) for c in kids]
        if any(s is None for s in scores):
            log.warning("skipping branch %s: assistant replies lack %r scores", m.message_id, quality_key)
            continue
        best_i = max(range(len(kids)), key=lambda i: scores[i])
        context = tree.path_to(m.message_id)
        for i, c in enumerate(kids):
            if i == best_i:
                continue
            if scores[i] == scores[best_i]:
                log.warning("tie at %s between %s and %s; pair skipped", m.message_id, kids[best_i].message_id, c.message_id)
                continue
            pairs.append(PreferencePair(context, kids[best_i], c))
    return pairs


def records_to_trees(records: Iterable[dict], conversation_key: str = "conversation",
                     quality_key: str = "quality") -> list[OasstTree]:
    """Build linear trees from output records and merge those sharing a root."""
    grouped: dict[str, list[OasstTree]] = {}
    missing = 0
    for rec in records:
        conv = rec.get(conversation_key)
        if conv is None and conversation_key != "messages":
            conv = rec.get("messages")
        if not isinstance(conv, list):
            missing += 1
            continue
        meta = {k: v for k, v in rec.items() if k not in (conversation_key, "messages")}
        try:
            t = to_tree(conv, metadata=meta)
        except ConversionError as exc:
            log.warning("record skipped for OASST export: %s", exc)
            continue
        grouped.setdefault(t.tree_id, []).append(t)
    if missing:
        log.warning("%d record(s) without a %r conversation skipped for OASST export", missing, conversation_key)
    return [merge_trees(ts) for ts in grouped.values()]


def export(records: Iterable[dict], out_dir: str | Path, conversation_key: str = "conversation",
           quality_key: str = "quality.llm_score") -> dict[str, int]:
    """Write ``oasst.jsonl``, ``sft.jsonl`` and ``dpo.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trees = records_to_trees(records, conversation_key)
    counts = {"trees": len(trees), "messages": 0, "sft": 0, "dpo": 0}
    with open(out / "oasst.jsonl", "w", encoding="utf-8") as fo, \
            open(out / "sft.jsonl", "w", encoding="utf-8") as fs, \
            open(out / "dpo.jsonl", "w", encoding="utf-8") as fd:
        for t in trees:
            for m in t.walk():
                fo.write(json.dumps(m.to_json(), ensure_ascii=False, default=str) + "\n")
                counts["messages"] += 1
            for ex in extract_sft(t):
                fs.write(json.dumps(ex, ensure_ascii=False) + "\n")
                counts["sft"] += 1
            for pair in extract_dpo(t, quality_key):
                fd.write(json.dumps(pair.to_json(t), ensure_ascii=False) + "\n")
                counts["dpo"] += 1
    return counts
