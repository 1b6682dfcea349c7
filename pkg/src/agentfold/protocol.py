"""Prompt rendering and response parsing.

The response grammar is five tagged blocks. ``<think>``, ``<explanation>``
and one of ``<tool_call>`` / ``<answer>`` are always required; ``<fold>`` is
required from step 2 on and forbidden at step 1. Block contents are trimmed
and must not contain any of the reserved tags themselves.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Optional, Sequence

from .workspace import (
    Action,
    FinalAnswer,
    FoldDirective,
    LatestInteraction,
    Question,
    ToolCall,
    ToolCatalog,
    Workspace,
    validate_workspace,
)

BLOCK_NAMES = ("think", "fold", "explanation", "tool_call", "answer")
RESERVED_TAGS = tuple(f"<{n}>" for n in BLOCK_NAMES) + tuple(f"</{n}>" for n in BLOCK_NAMES)
OBSERVATION_CAP = 50_000
SYSTEM_TEMPLATE_VERSION = "v1"

FORMAT_REMINDER = (
    "Your previous reply could not be parsed. Reply with exactly these blocks, in order: "
    "<think>...</think>, <fold>{\"range\": [k, t-1], \"summary\": \"...\"}</fold> (omitted at step 1), "
    "<explanation>...</explanation>, then either <tool_call>{\"name\": ..., \"arguments\": {...}}</tool_call> "
    "or <answer>...</answer>."
)


class InvalidWorkspace(ValueError):
    pass


class ParseError(ValueError):
    """Base class for completions that do not follow the response grammar."""

    kind = "ParseError"

    def __init__(self, message: str, block: str = "") -> None:
        super().__init__(message)
        self.block = block


class MissingBlock(ParseError):
    kind = "MissingBlock"


class DuplicateBlock(ParseError):
    kind = "DuplicateBlock"


class MalformedFoldJson(ParseError):
    kind = "MalformedFoldJson"


class MalformedToolJson(ParseError):
    kind = "MalformedToolJson"


class FoldAtStepOne(ParseError):
    kind = "FoldAtStepOne"


class FoldRangeEndMismatch(ParseError):
    kind = "RangeEndMismatch"


# parse errors that only concern the fold directive; the engine can recover from these
FOLD_ERRORS = (MalformedFoldJson, FoldRangeEndMismatch)


@dataclass(frozen=True)
class AgentResponse:
    thinking: str
    fold: Optional[FoldDirective]
    explanation: str
    action: Action


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    section_spans: dict[str, tuple[int, int]] = field(default_factory=dict)
    step: int = 1
    # the structure that produced this text; not part of the rendered content
    workspace: Optional[Workspace] = field(default=None, compare=False, repr=False)
    # 0 for the first request at this step, incremented on each resample
    attempt: int = field(default=0, compare=False)

    def section(self, name: str) -> str:
        a, b = self.section_spans[name]
        return self.text.encode("utf-8")[a:b].decode("utf-8")


def system_template(display_offset: int = 0) -> str:
    """System prompt, with the label-to-fold-range numbering spelled out for ``display_offset``."""
    text = resources.files("agentfold").joinpath(f"templates/system_{SYSTEM_TEMPLATE_VERSION}.txt").read_text("utf-8")
    shift = 1 - display_offset
    if shift == 0:
        note = "Fold ranges use the step numbers shown in the labels."
    else:
        note = (f"Fold ranges count steps from 1: the step labelled X is step X{shift:+d} in a fold range, "
                f"so [Compressed Step A to B] covers range [A{shift:+d}, B{shift:+d}].")
    return text.replace("{step_numbering}", note)


# ---------------------------------------------------------------- labels

def block_label(start: int, end: int, display_offset: int = 0) -> str:
    a = start + display_offset - 1
    if start == end:
        return f"[Compressed Step {a}]"
    return f"[Compressed Step {a} to {end + display_offset - 1}]"


def step_label(step: int, display_offset: int = 0) -> str:
    return f"[Step {step + display_offset - 1}]"


_LABEL_RE = re.compile(r"\[Compressed Step (-?\d+)(?: to (-?\d+))?\]|\[Step (-?\d+)\]")


def parse_label(label: str, display_offset: int = 0) -> tuple[str, int, int]:
    """Invert :func:`block_label` / :func:`step_label`: returns (kind, start, end)."""
    m = _LABEL_RE.fullmatch(label.strip())
    if m is None:
        raise ValueError(f"not a block label: {label!r}")
    shift = 1 - display_offset
    if m.group(3) is not None:
        s = int(m.group(3)) + shift
        return "latest", s, s
    a = int(m.group(1)) + shift
    b = int(m.group(2)) + shift if m.group(2) is not None else a
    return "summary", a, b


def structure_labels(ws: Workspace, display_offset: int = 0) -> list[str]:
    """Block labels of a workspace in context order, latest interaction last."""
    labels = [block_label(b.start, b.end, display_offset) for b in ws.summaries]
    if ws.latest is not None:
        labels.append(step_label(ws.latest.step, display_offset))
    return labels


# ---------------------------------------------------------------- rendering

def tool_call_json(call: ToolCall) -> str:
    return json.dumps({"name": call.name, "arguments": call.arguments}, ensure_ascii=False, sort_keys=True)


def render_tools(tools: ToolCatalog) -> str:
    return json.dumps([t.to_json() for t in tools.tools], indent=2, ensure_ascii=False)


def cap_observation(text: str, cap: int = OBSERVATION_CAP) -> str:
    if len(text) <= cap:
        return text
    return text[:cap] + f"\n[observation truncated: {len(text) - cap} characters omitted]"


def render_interaction(inter: LatestInteraction, display_offset: int = 0, obs_cap: int = OBSERVATION_CAP) -> str:
    if inter.action is None:
        action = "(none: response could not be parsed)"
    elif isinstance(inter.action, ToolCall):
        action = tool_call_json(inter.action)
    else:
        action = json.dumps({"answer": inter.action.text}, ensure_ascii=False)
    return (
        f"{step_label(inter.step, display_offset)}\n"
        f"Explanation: {inter.explanation}\n"
        f"Action: {action}\n"
        f"Observation:\n{cap_observation(inter.observation, obs_cap)}"
    )


def _assemble(sections: Sequence[tuple[str, str, str]], step: int, ws: Optional[Workspace] = None) -> RenderedPrompt:
    parts: list[str] = []
    spans: dict[str, tuple[int, int]] = {}
    offset = 0
    for i, (key, title, body) in enumerate(sections):
        chunk = f"# {title}\n{body}"
        n = len(chunk.encode("utf-8"))
        spans[key] = (offset, offset + n)
        parts.append(chunk)
        offset += n
        if i < len(sections) - 1:
            parts.append("\n\n")
            offset += 2
    return RenderedPrompt("".join(parts), spans, step, ws)


def render_context(ws: Workspace, display_offset: int = 0, obs_cap: int = OBSERVATION_CAP) -> RenderedPrompt:
    """Render the four context sections: question, tools, state summaries, latest interaction."""
    problem = validate_workspace(ws)
    if problem is not None:
        raise InvalidWorkspace(str(problem))
    summaries = "\n".join(f"{block_label(b.start, b.end, display_offset)} {b.summary}" for b in ws.summaries)
    latest = render_interaction(ws.latest, display_offset, obs_cap) if ws.latest is not None else ""
    return _assemble(
        [
            ("question", "Question", ws.question.text),
            ("tools", "Tools", render_tools(ws.tools)),
            ("summaries", "Multi-Scale State Summaries", summaries or "(none)"),
            ("latest", "Latest Interaction", latest or "(none)"),
        ],
        ws.step,
        ws,
    )


def build_react_context(
    question: Question,
    tools: ToolCatalog,
    history: Iterable[LatestInteraction],
    display_offset: int = 0,
    obs_cap: int = OBSERVATION_CAP,
) -> RenderedPrompt:
    """Append-only baseline context: every past interaction, verbatim, in order."""
    history = list(history)
    body = "\n\n".join(render_interaction(h, display_offset, obs_cap) for h in history)
    return _assemble(
        [
            ("question", "Question", question.text),
            ("tools", "Tools", render_tools(tools)),
            ("history", "Interaction History", body or "(none)"),
        ],
        len(history) + 1,
    )


# ---------------------------------------------------------------- parsing

_OPEN_RE = re.compile(r"<(think|fold|explanation|tool_call|answer)>")


def _extract_blocks(raw: str) -> dict[str, str]:
    blocks: dict[str, str] = {}
    pos = 0
    while True:
        m = _OPEN_RE.search(raw, pos)
        if m is None:
            break
        name = m.group(1)
        close = f"</{name}>"
        end = raw.find(close, m.end())
        if end < 0:
            raise MissingBlock(f"block <{name}> is not closed", name)
        if name in blocks:
            raise DuplicateBlock(f"block <{name}> appears more than once", name)
        body = raw[m.end():end]
        if _OPEN_RE.search(body):
            raise MissingBlock(f"block <{name}> is not closed before the next block", name)
        blocks[name] = body.strip()
        pos = end + len(close)
    for name in BLOCK_NAMES:
        if f"</{name}>" in raw and name not in blocks:
            raise MissingBlock(f"stray closing tag </{name}>", name)
    return blocks


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_fold_json(body: str) -> FoldDirective:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedFoldJson(f"fold is not valid JSON: {exc}", "fold") from None
    if not isinstance(obj, dict) or set(obj) != {"range", "summary"}:
        raise MalformedFoldJson('fold must be an object with exactly the keys "range" and "summary"', "fold")
    rng, summary = obj["range"], obj["summary"]
    if not (isinstance(rng, list) and len(rng) == 2 and all(_is_int(v) for v in rng)):
        raise MalformedFoldJson('fold "range" must be a list of two integers', "fold")
    if not isinstance(summary, str) or not summary.strip():
        raise MalformedFoldJson('fold "summary" must be a non-empty string', "fold")
    if not (1 <= rng[0] <= rng[1]):
        raise MalformedFoldJson(f"fold range {rng} is not an ordered range of positive steps", "fold")
    return FoldDirective(rng[0], rng[1], summary)


def parse_tool_json(body: str) -> ToolCall:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedToolJson(f"tool_call is not valid JSON: {exc}", "tool_call") from None
    if not isinstance(obj, dict) or "name" not in obj or not set(obj) <= {"name", "arguments"}:
        raise MalformedToolJson('tool_call must be an object with "name" and optional "arguments"', "tool_call")
    name, args = obj["name"], obj.get("arguments", {})
    if not isinstance(name, str) or not name:
        raise MalformedToolJson("tool name must be a non-empty string", "tool_call")
    if not isinstance(args, dict):
        raise MalformedToolJson("tool arguments must be an object", "tool_call")
    return ToolCall(name, args)


def parse_response(raw: str, step: int, *, folding: bool = True) -> AgentResponse:
    """Parse a raw completion into an :class:`AgentResponse`.

    Raises a :class:`ParseError` subclass for every non-conforming input.
    With ``folding=False`` (append-only baseline) fold presence is not
    checked and any fold block is dropped.
    """
    if not isinstance(raw, str):
        raise ParseError("completion is not text")
    blocks = _extract_blocks(raw)
    for name in ("think", "explanation"):
        if name not in blocks:
            raise MissingBlock(f"missing <{name}> block", name)
    if not blocks["explanation"]:
        raise MissingBlock("<explanation> block is empty", "explanation")

    if "tool_call" in blocks and "answer" in blocks:
        raise DuplicateBlock("both <tool_call> and <answer> present; exactly one action is allowed", "action")
    if "tool_call" in blocks:
        action: Action = parse_tool_json(blocks["tool_call"])
    elif "answer" in blocks:
        action = FinalAnswer(blocks["answer"])
    else:
        raise MissingBlock("missing action: expected <tool_call> or <answer>", "action")

    fold = None
    if folding:
        if step <= 1:
            if "fold" in blocks:
                raise FoldAtStepOne("step 1 must not carry a fold directive", "fold")
        else:
            if "fold" not in blocks:
                raise MissingBlock("missing <fold> block", "fold")
            fold = parse_fold_json(blocks["fold"])
            if fold.range_end != step - 1:
                raise FoldRangeEndMismatch(f"fold range ends at {fold.range_end}, expected {step - 1}", "fold")
    return AgentResponse(blocks["think"], fold, blocks["explanation"], action)


def serialize_response(r: AgentResponse) -> str:
    """Canonical tagged form accepted by :func:`parse_response`."""
    parts = [f"<think>\n{r.thinking}\n</think>"]
    if r.fold is not None:
        fold = json.dumps({"range": [r.fold.range_start, r.fold.range_end], "summary": r.fold.summary}, ensure_ascii=False)
        parts.append(f"<fold>\n{fold}\n</fold>")
    parts.append(f"<explanation>\n{r.explanation}\n</explanation>")
    if isinstance(r.action, ToolCall):
        parts.append(f"<tool_call>\n{tool_call_json(r.action)}\n</tool_call>")
    else:
        parts.append(f"<answer>\n{r.action.text}\n</answer>")
    return "\n".join(parts)


# ---------------------------------------------------------------- JSON forms

def action_to_dict(a: Optional[Action]) -> Optional[dict[str, Any]]:
    if a is None:
        return None
    if isinstance(a, ToolCall):
        return {"type": "tool_call", "name": a.name, "arguments": a.arguments}
    return {"type": "answer", "text": a.text}


def action_from_dict(d: Optional[dict[str, Any]]) -> Optional[Action]:
    if d is None:
        return None
    if d.get("type") == "answer":
        return FinalAnswer(d["text"])
    return ToolCall(d["name"], dict(d.get("arguments", {})))


def response_to_dict(r: AgentResponse) -> dict[str, Any]:
    fold = None
    if r.fold is not None:
        fold = {"range": [r.fold.range_start, r.fold.range_end], "summary": r.fold.summary}
    return {"thinking": r.thinking, "fold": fold, "explanation": r.explanation, "action": action_to_dict(r.action)}


def response_from_dict(d: dict[str, Any]) -> AgentResponse:
    fold = None
    if d.get("fold"):
        k, e = d["fold"]["range"]
        fold = FoldDirective(int(k), int(e), d["fold"]["summary"])
    action = action_from_dict(d["action"])
    if action is None:
        raise ValueError("response requires an action")
    return AgentResponse(d.get("thinking", ""), fold, d["explanation"], action)
