from __future__ import annotations

from pathlib import Path

import pytest

from agentfold.protocol import AgentResponse
from agentfold.toolbox import default_catalog
from agentfold.workspace import (
    FinalAnswer,
    FoldDirective,
    LatestInteraction,
    Question,
    SummaryBlock,
    ToolCall,
    Workspace,
)

FIXTURES = Path(__file__).parent / "fixtures"


def blocks(*ranges: tuple[int, int]) -> tuple[SummaryBlock, ...]:
    return tuple(SummaryBlock(a, b, f"s{a}-{b}") for a, b in ranges)


def inter(step: int, obs: str = "obs") -> LatestInteraction:
    return LatestInteraction(step, f"why {step}", ToolCall("search", {"query": f"q{step}"}), obs)


def make_ws(step: int, ranges=(), latest: int | None = None) -> Workspace:
    return Workspace(
        Question("What is the answer?"),
        default_catalog(),
        blocks(*ranges),
        inter(latest) if latest is not None else None,
        step,
    )


def tool_response(fold: tuple[int, int] | None = None, name: str = "search", summary: str = "folded") -> AgentResponse:
    directive = FoldDirective(fold[0], fold[1], summary) if fold else None
    return AgentResponse("thinking", directive, "explanation", ToolCall(name, {"query": "x"}))


def answer_response(fold: tuple[int, int] | None = None, text: str = "42") -> AgentResponse:
    directive = FoldDirective(fold[0], fold[1], "done") if fold else None
    return AgentResponse("thinking", directive, "final", FinalAnswer(text))


def load_case_study() -> list[list[str]]:
    """Rows of the published case-study table: labels per turn (turn 1 first)."""
    rows = []
    for line in (FIXTURES / "case_study_1.tsv").read_text(encoding="utf-8").splitlines():
        _, _, labels = line.partition("\t")
        rows.append([s.strip() for s in labels.split(",") if s.strip()] if labels.strip() else [])
    return rows


@pytest.fixture
def case_study() -> list[list[str]]:
    return load_case_study()


def golden_script(rows: list[list[str]]) -> list[AgentResponse]:
    """Scripted responses whose folds reproduce the case-study table.

    The fold issued at step t is read off row t+1: its last compressed block
    is the one the directive creates. The final step answers.
    """
    from agentfold.protocol import parse_label

    script = []
    n = len(rows)
    for t in range(1, n + 1):
        fold = None
        if 2 <= t < n:
            kind, k, e = parse_label(rows[t][-2])
            assert kind == "summary" and e == t - 1, (t, rows[t])
            fold = (k, e)
        elif t == n:
            fold = (t - 1, t - 1)
        if t < n:
            script.append(tool_response(fold, summary=f"condensed through step {t - 1}"))
        else:
            script.append(answer_response(fold))
    return script


def make_registry():
    from agentfold.toolbox import MockCorpus, mock_registry

    return mock_registry(MockCorpus(docs={"treasure": "x marks the spot", "atlas": "maps of the world"}))


@pytest.fixture
def registry():
    return make_registry()


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
