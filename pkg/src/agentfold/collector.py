"""Teacher-driven SFT data collection with rejection sampling.

Each question is driven through the folding loop with a teacher backend. A
step whose completion fails the format gate is resampled up to
``max_step_retries`` times; if it still fails the trajectory is abandoned.
Trajectories with more than ``max_env_errors`` environment errors are
discarded whole. Everything that survives is written as (context, response)
pairs, one JSON object per line.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .backends import BackendError, ChatBackend, GenerationParams
from .engine import act, check_fold, commit
from .protocol import (
    AgentResponse,
    ParseError,
    parse_label,
    parse_response,
    render_context,
    serialize_response,
)
from .toolbox import ToolRegistry
from .workspace import FinalAnswer, FoldError, Question, ToolCall, Workspace, initial_workspace

log = logging.getLogger(__name__)

Gate = Callable[[Workspace, AgentResponse], Optional[str]]


class OutputUnwritable(OSError):
    pass


class TeacherUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class SftPair:
    context: str
    response: str
    question_id: str
    step: int
    display_offset: int = 0
    label: Optional[str] = None

    def to_json(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "step": self.step,
            "context": self.context,
            "response": self.response,
            "display_offset": self.display_offset,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "SftPair":
        return cls(obj["context"], obj["response"], str(obj["question_id"]), int(obj["step"]),
                   int(obj.get("display_offset", 0)), obj.get("label"))


@dataclass
class CollectionConfig:
    questions: Sequence[Question]
    teacher: Callable[[Question], ChatBackend]
    tools: Callable[[Question], ToolRegistry]
    output_path: str | Path
    max_step_retries: int = 3
    max_env_errors: int = 3
    max_turns: int = 100
    display_offset: int = 0
    params: GenerationParams = GenerationParams()
    workers: int = 1
    gates: Sequence[Gate] = ()

    def __post_init__(self) -> None:
        if not self.questions:
            raise ValueError("questions must be non-empty")
        if self.max_step_retries < 0 or self.max_env_errors < 0:
            raise ValueError("retry and error limits must be non-negative")


@dataclass
class TrajectoryOutcome:
    question_id: str
    pairs: list[SftPair] = field(default_factory=list)
    attempted: int = 0
    rejected_terminal: int = 0
    discarded: int = 0
    status: str = "kept"  # kept | abandoned | discarded
    rejections: Counter = field(default_factory=Counter)
    terminal_reason: Optional[str] = None


@dataclass
class CollectionReport:
    pairs_emitted: int = 0
    steps_attempted: int = 0
    steps_rejected_terminal: int = 0
    steps_in_discarded_trajectories: int = 0
    trajectories_kept: int = 0
    trajectories_abandoned: int = 0
    trajectories_discarded: int = 0
    rejections_by_reason: dict[str, int] = field(default_factory=dict)
    terminal_reasons: dict[str, int] = field(default_factory=dict)

    @property
    def balanced(self) -> bool:
        return self.pairs_emitted + self.steps_rejected_terminal + self.steps_in_discarded_trajectories == self.steps_attempted

    def to_json(self) -> dict[str, Any]:
        return {
            "pairs_emitted": self.pairs_emitted,
            "steps_attempted": self.steps_attempted,
            "steps_rejected_terminal": self.steps_rejected_terminal,
            "steps_in_discarded_trajectories": self.steps_in_discarded_trajectories,
            "trajectories_kept": self.trajectories_kept,
            "trajectories_abandoned": self.trajectories_abandoned,
            "trajectories_discarded": self.trajectories_discarded,
            "rejections_by_reason": dict(sorted(self.rejections_by_reason.items())),
            "terminal_reasons": dict(sorted(self.terminal_reasons.items())),
        }


def _gate(ws: Workspace, raw: str, gates: Sequence[Gate]) -> tuple[Optional[AgentResponse], Optional[str]]:
    try:
        r = parse_response(raw, ws.step)
        check_fold(ws, r)
    except ParseError as exc:
        return None, exc.kind
    except FoldError as exc:
        return None, exc.name
    if isinstance(r.action, ToolCall) and r.action.name not in ws.tools:
        return None, "ToolNotFound"
    for gate in gates:
        reason = gate(ws, r)
        if reason:
            return None, reason
    return r, None


def collect_one(question: Question, cfg: CollectionConfig) -> TrajectoryOutcome:
    teacher = cfg.teacher(question)
    tools = cfg.tools(question)
    out = TrajectoryOutcome(question.qid)
    ws = initial_workspace(question, tools.catalog())
    env_errors = 0
    while ws.step <= cfg.max_turns:
        out.attempted += 1
        prompt = render_context(ws, cfg.display_offset)
        response, reason = None, None
        for attempt in range(cfg.max_step_retries + 1):
            try:
                raw = teacher.complete(replace(prompt, attempt=attempt), cfg.params)
            except BackendError as exc:
                raise TeacherUnavailable(f"teacher failed on {question.qid} step {ws.step}: {exc}") from exc
            response, reason = _gate(ws, raw, cfg.gates)
            if response is not None:
                break
            out.rejections[reason] += 1
        if response is None:
            out.rejected_terminal += 1
            out.discarded += len(out.pairs)
            out.pairs = []
            out.status, out.terminal_reason = "abandoned", reason
            return out
        out.pairs.append(SftPair(prompt.text, serialize_response(response), question.qid, ws.step, cfg.display_offset))
        observation, env_error = act(response, tools)
        if env_error:
            env_errors += 1
            if env_errors > cfg.max_env_errors:
                out.discarded += len(out.pairs)
                out.pairs = []
                out.status, out.terminal_reason = "discarded", "EnvErrorLimit"
                return out
        if isinstance(response.action, FinalAnswer):
            break
        ws, _ = commit(ws, response, observation)
    return out


def collect(cfg: CollectionConfig) -> CollectionReport:
    path = Path(cfg.output_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(path, "w", encoding="utf-8")
    except OSError as exc:
        raise OutputUnwritable(f"cannot write {path}: {exc}") from exc
    report = CollectionReport()
    reasons: Counter = Counter()
    terminal: Counter = Counter()
    with fh:
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(lambda q: collect_one(q, cfg), cfg.questions))
        else:
            outcomes = [collect_one(q, cfg) for q in cfg.questions]
        # single writer, question order
        for o in outcomes:
            for pair in o.pairs:
                fh.write(json.dumps(pair.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
            report.pairs_emitted += len(o.pairs)
            report.steps_attempted += o.attempted
            report.steps_rejected_terminal += o.rejected_terminal
            report.steps_in_discarded_trajectories += o.discarded
            reasons.update(o.rejections)
            if o.status == "kept":
                report.trajectories_kept += 1
            elif o.status == "abandoned":
                report.trajectories_abandoned += 1
            else:
                report.trajectories_discarded += 1
            if o.terminal_reason:
                terminal[o.terminal_reason] += 1
    report.rejections_by_reason = dict(reasons)
    report.terminal_reasons = dict(terminal)
    return report


# ---------------------------------------------------------------- re-validation

@dataclass(frozen=True)
class PairViolation:
    kind: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


_HEADERS = ("# Question\n", "\n\n# Tools\n", "\n\n# Multi-Scale State Summaries\n", "\n\n# Latest Interaction\n")
_LINE_LABEL = re.compile(r"^(\[Compressed Step -?\d+(?: to -?\d+)?\])", re.MULTILINE)
_LATEST_LABEL = re.compile(r"^(\[Step -?\d+\])$", re.MULTILINE)


def read_context(text: str, display_offset: int = 0) -> tuple[list[tuple[int, int]], Optional[int], list[str]]:
    """Recover (block ranges, latest step, tool names) from rendered context text alone."""
    pos = [text.find(h) for h in _HEADERS]
    if pos[0] != 0 or any(p < 0 for p in pos) or pos != sorted(pos):
        raise ValueError("context text does not have the four expected sections")
    tools_text = text[pos[1] + len(_HEADERS[1]):pos[2]]
    summaries_text = text[pos[2] + len(_HEADERS[2]):pos[3]]
    latest_text = text[pos[3] + len(_HEADERS[3]):]
    names = [t["name"] for t in json.loads(tools_text)]
    blocks = []
    for m in _LINE_LABEL.finditer(summaries_text):
        _, a, b = parse_label(m.group(1), display_offset)
        blocks.append((a, b))
    latest = None
    first_line = latest_text.split("\n", 1)[0]
    if _LATEST_LABEL.match(first_line):
        latest = parse_label(first_line, display_offset)[1]
    return blocks, latest, names


def validate_pair(p: SftPair) -> Optional[PairViolation]:
    """Re-check one pair from its text alone. Returns None when it is sound."""
    try:
        blocks, latest, names = read_context(p.context, p.display_offset)
    except (ValueError, KeyError, TypeError) as exc:
        return PairViolation("ContextUnreadable", str(exc))
    try:
        r = parse_response(p.response, p.step)
    except ParseError as exc:
        return PairViolation(exc.kind, str(exc))
    expected_latest = p.step - 1 if p.step > 1 else None
    if latest != expected_latest:
        return PairViolation("StepMismatch", f"context latest step {latest}, expected {expected_latest}")
    covered = blocks[-1][1] if blocks else 0
    if covered != max(0, p.step - 2) or (blocks and blocks[0][0] != 1):
        return PairViolation("ContextPartition", f"summaries {blocks} do not cover 1..{p.step - 2}")
    if r.fold is not None:
        if r.fold.range_end != p.step - 1:
            return PairViolation("RangeEndMismatch", f"fold ends at {r.fold.range_end}, expected {p.step - 1}")
        if r.fold.range_start != latest and r.fold.range_start not in {a for a, _ in blocks}:
            return PairViolation("RangeMisaligned", f"fold start {r.fold.range_start} is inside a block")
    if isinstance(r.action, ToolCall) and r.action.name not in names:
        return PairViolation("ToolNotFound", f"tool {r.action.name!r} not in the context's catalog")
    return None


def read_pairs(path: str | Path) -> list[SftPair]:
    with open(path, encoding="utf-8") as fh:
        return [SftPair.from_json(json.loads(line)) for line in fh if line.strip()]


def load_questions(path: str | Path) -> list[Question]:
    """Question file: JSONL with ``{"id": ..., "question": ...}`` objects."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "question" not in obj:
                raise ValueError(f"{path}:{lineno}: missing 'question'")
            out.append(Question(obj["question"], str(obj.get("id", lineno))))
    return out
