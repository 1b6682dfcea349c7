"""Context data model and the fold engine.

Steps are 1-based internally: the first executed step is step 1, and a
workspace at step ``t`` holds summaries covering steps ``1..t-2`` plus the
verbatim record of step ``t-1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Union

log = logging.getLogger(__name__)

SUMMARY_SOFT_CAP = 2000
IMPLICIT_SUMMARY_CAP = 500


class FoldError(ValueError):
    """Base class for directives that cannot be applied to a workspace."""

    name = "FoldError"


class RangeMisaligned(FoldError):
    name = "RangeMisaligned"


class RangeEndMismatch(FoldError):
    name = "RangeEndMismatch"


class NoLatestInteraction(FoldError):
    name = "NoLatestInteraction"


class StepMismatch(FoldError):
    name = "StepMismatch"


@dataclass(frozen=True)
class Question:
    text: str
    qid: str = ""

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("question text must be non-empty")


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str = "string"
    description: str = ""
    required: bool = True


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: tuple[ToolParam, ...] = ()

    def to_json(self) -> dict[str, Any]:
        """JSON-schema style description used verbatim in prompts."""
        props = {p.name: {"type": p.type, "description": p.description} for p in self.parameters}
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": props,
                "required": [p.name for p in self.parameters if p.required],
            },
        }


@dataclass(frozen=True)
class ToolCatalog:
    tools: tuple[ToolSchema, ...] = ()

    def __post_init__(self) -> None:
        names = [t.name for t in self.tools]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate tool names in catalog: {names}")

    def names(self) -> list[str]:
        return [t.name for t in self.tools]

    def get(self, name: str) -> Optional[ToolSchema]:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    def __contains__(self, name: object) -> bool:
        return any(t.name == name for t in self.tools)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def __hash__(self) -> int:  # arguments is a dict; hash on the name only
        return hash(self.name)


@dataclass(frozen=True)
class FinalAnswer:
    text: str


Action = Union[ToolCall, FinalAnswer]


@dataclass(frozen=True)
class SummaryBlock:
    start: int
    end: int
    summary: str

    def __post_init__(self) -> None:
        if self.start < 1 or self.end < self.start:
            raise ValueError(f"invalid block range ({self.start}, {self.end})")
        if not self.summary:
            raise ValueError("block summary must be non-empty")

    @property
    def span(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class LatestInteraction:
    """Verbatim record of one executed step.

    ``action`` is None only when the model produced no usable action at all;
    the engine records such steps so the partition stays total.
    """

    step: int
    explanation: str
    action: Optional[Action]
    observation: str = ""


@dataclass(frozen=True)
class FoldDirective:
    range_start: int
    range_end: int
    summary: str

    def __post_init__(self) -> None:
        if not (1 <= self.range_start <= self.range_end):
            raise ValueError(f"invalid fold range [{self.range_start}, {self.range_end}]")
        if not self.summary:
            raise ValueError("fold summary must be non-empty")


@dataclass(frozen=True)
class Workspace:
    question: Question
    tools: ToolCatalog
    summaries: tuple[SummaryBlock, ...] = ()
    latest: Optional[LatestInteraction] = None
    step: int = 1

    @property
    def block_count(self) -> int:
        """Summary blocks plus the latest interaction, if any."""
        return len(self.summaries) + (1 if self.latest is not None else 0)


def initial_workspace(question: Question | str, tools: ToolCatalog) -> Workspace:
    if isinstance(question, str):
        question = Question(question)
    return Workspace(question=question, tools=tools)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self) -> str:
        return self.message


def check_blocks(blocks: tuple[SummaryBlock, ...] | list[SummaryBlock], covered_to: int) -> Optional[Violation]:
    """Check the partition constraints on a block sequence covering ``1..covered_to``."""
    if not blocks:
        if covered_to > 0:
            return Violation("coverage", f"no summaries but steps 1..{covered_to} must be covered")
        return None
    if blocks[0].start != 1:
        return Violation("start", f"first block starts at {blocks[0].start}, expected 1")
    for i in range(1, len(blocks)):
        if blocks[i].start != blocks[i - 1].end + 1:
            return Violation("contiguity", f"contiguity broken at index {i}")
    if blocks[-1].end != covered_to:
        return Violation("coverage", f"last block ends at {blocks[-1].end}, expected {covered_to}")
    return None


def validate_workspace(ws: Workspace) -> Optional[Violation]:
    """Return None when every workspace invariant holds, else the first violation."""
    if ws.step < 1:
        return Violation("step", f"step must be positive, got {ws.step}")
    if ws.step == 1:
        if ws.summaries or ws.latest is not None:
            return Violation("initial", "step 1 must have no summaries and no latest interaction")
        return None
    if ws.latest is None:
        return Violation("latest", f"step {ws.step} requires a latest interaction")
    if ws.latest.step != ws.step - 1:
        return Violation("latest", f"latest.step is {ws.latest.step}, expected {ws.step - 1}")
    if ws.step == 2 and ws.summaries:
        return Violation("initial", "step 2 must have no summaries")
    return check_blocks(ws.summaries, ws.step - 2)


def fold_mode(ws: Workspace, directive: FoldDirective) -> str:
    return "granular" if directive.range_start == ws.step - 1 else "deep"


def apply_fold(ws: Workspace, directive: FoldDirective) -> tuple[SummaryBlock, ...]:
    """Retract every block inside ``[range_start, t-1]`` and append one block for it.

    Returns the new summary sequence covering ``1..t-1``.
    """
    if ws.latest is None or ws.step < 2:
        raise NoLatestInteraction(f"cannot fold at step {ws.step}: no latest interaction")
    t = ws.step
    if directive.range_end != t - 1:
        raise RangeEndMismatch(f"fold range ends at {directive.range_end}, expected {t - 1}")
    k = directive.range_start
    starts = {b.start for b in ws.summaries}
    if k != ws.latest.step and k not in starts:
        raise RangeMisaligned(f"fold start {k} falls inside an existing block")
    if len(directive.summary) > SUMMARY_SOFT_CAP:
        log.warning("fold summary is %d characters (soft cap %d)", len(directive.summary), SUMMARY_SOFT_CAP)
    kept = tuple(b for b in ws.summaries if b.start < k)
    return kept + (SummaryBlock(k, t - 1, directive.summary),)


def implicit_directive(ws: Workspace, cap: int = IMPLICIT_SUMMARY_CAP) -> FoldDirective:
    """Granular fold used when a response carries no usable directive."""
    if ws.latest is None:
        raise NoLatestInteraction("no latest interaction to condense")
    text = ws.latest.explanation.strip()[:cap] or f"step {ws.latest.step} (no explanation recorded)"
    return FoldDirective(ws.step - 1, ws.step - 1, text)


def advance(
    ws: Workspace,
    new_summaries: tuple[SummaryBlock, ...] | list[SummaryBlock],
    interaction: LatestInteraction,
) -> Workspace:
    """Hand the workspace off to step t+1 with the folded summaries and new interaction."""
    if interaction.step != ws.step:
        raise StepMismatch(f"interaction step {interaction.step} != workspace step {ws.step}")
    new_summaries = tuple(new_summaries)
    problem = check_blocks(new_summaries, ws.step - 1)
    if problem is not None:
        raise StepMismatch(f"summaries do not cover 1..{ws.step - 1}: {problem}")
    return replace(ws, summaries=new_summaries, latest=interaction, step=ws.step + 1)
