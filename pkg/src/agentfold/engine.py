"""The perceive -> reason -> fold -> act loop, plus the append-only baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

from .backends import BackendError, ChatBackend, GenerationParams
from .protocol import (
    FOLD_ERRORS,
    FORMAT_REMINDER,
    AgentResponse,
    MissingBlock,
    ParseError,
    RenderedPrompt,
    build_react_context,
    parse_response,
    render_context,
    response_to_dict,
)
from .tokens import DEFAULT_COUNTER, TokenCounter
from .toolbox import BadArguments, ToolNotFound, ToolRegistry, execute
from .trajectory import EpisodeResult, Termination, TrajectoryRecord
from .workspace import (
    IMPLICIT_SUMMARY_CAP,
    FinalAnswer,
    FoldError,
    LatestInteraction,
    Question,
    Workspace,
    advance,
    apply_fold,
    implicit_directive,
    initial_workspace,
    validate_workspace,
)

log = logging.getLogger(__name__)

FOLD = "fold"
REACT = "react"


class InvariantBroken(RuntimeError):
    """The workspace failed validation after a step; the episode cannot continue."""


class ParseFailure(Exception):
    def __init__(self, error: ParseError, raw: str) -> None:
        super().__init__(str(error))
        self.error = error
        self.raw = raw


@dataclass(frozen=True)
class EpisodeConfig:
    max_turns: int = 100
    max_env_errors: int = 3
    display_offset: int = 0
    policy: str = FOLD
    params: GenerationParams = GenerationParams()
    parse_retries: int = 1
    implicit_summary_cap: int = IMPLICIT_SUMMARY_CAP
    salvage_on_turn_limit: bool = False
    store_prompt: bool = True

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.max_env_errors < 0:
            raise ValueError("max_env_errors must be >= 0")
        if self.policy not in (FOLD, REACT):
            raise ValueError(f"unknown policy {self.policy!r}")


@dataclass(frozen=True)
class StepResult:
    prompt: RenderedPrompt
    raw: str
    response: Optional[AgentResponse]
    parse_error: Optional[ParseError]
    observation: str
    env_error: bool
    next: Workspace
    implicit_fold: bool = False
    retries: int = 0

    @property
    def done(self) -> bool:
        return self.response is not None and isinstance(self.response.action, FinalAnswer)


def with_reminder(prompt: RenderedPrompt, attempt: int) -> RenderedPrompt:
    return replace(prompt, text=prompt.text + "\n\n" + FORMAT_REMINDER, attempt=attempt)


def act(response: Optional[AgentResponse], tools: ToolRegistry) -> tuple[str, bool]:
    """Execute the response's action. Returns (observation, env_error)."""
    if response is None:
        return "[format error] the response could not be parsed; no action was executed", True
    if isinstance(response.action, FinalAnswer):
        return "", False
    try:
        obs = execute(tools, response.action)
    except ToolNotFound as exc:
        return f"[tool error: NotFound] {exc}", True
    except BadArguments as exc:
        return exc.render(), True
    return obs.text, obs.is_error


def check_fold(ws: Workspace, response: AgentResponse) -> None:
    """Raise FoldError if the response's directive cannot be applied to ``ws``."""
    if ws.step >= 2 and response.fold is not None:
        apply_fold(ws, response.fold)


def commit(ws: Workspace, response: Optional[AgentResponse], observation: str, *, implicit_cap: int = IMPLICIT_SUMMARY_CAP) -> tuple[Workspace, bool]:
    """Apply the fold and hand off to step t+1. Returns (next workspace, used implicit fold)."""
    implicit = False
    if ws.step == 1:
        summaries: tuple = ()
    else:
        directive = response.fold if response is not None else None
        if directive is None:
            directive = implicit_directive(ws, implicit_cap)
            implicit = True
        summaries = apply_fold(ws, directive)
    if response is None:
        inter = LatestInteraction(ws.step, "[unparseable response]", None, observation)
    else:
        inter = LatestInteraction(ws.step, response.explanation, response.action, observation)
    return advance(ws, summaries, inter), implicit


def _lenient(raw: str, step: int) -> Optional[AgentResponse]:
    """Recover explanation and action when only the fold directive is unusable."""
    try:
        r = parse_response(raw, step, folding=False)
    except ParseError:
        return None
    return replace(r, fold=None)


def _query(backend: ChatBackend, prompt: RenderedPrompt, params: GenerationParams) -> str:
    try:
        return backend.complete(prompt, params)
    except BackendError:
        raise
    except Exception as exc:  # transport libraries may leak their own errors
        raise BackendError(f"{type(exc).__name__}: {exc}") from exc


def run_step(ws: Workspace, backend: ChatBackend, tools: ToolRegistry, cfg: EpisodeConfig = EpisodeConfig()) -> StepResult:
    """One full cycle on the folding workspace.

    Parse failures are retried once with a format reminder; after that a
    fold-only problem falls back to an implicit granular condensation, and
    an unusable action is recorded as an environment error.
    """
    problem = validate_workspace(ws)
    if problem is not None:
        raise InvariantBroken(str(problem))
    prompt = render_context(ws, cfg.display_offset)
    request = prompt
    raw = ""
    response: Optional[AgentResponse] = None
    error: Optional[ParseError] = None
    fold_problem = False
    attempts = 0
    for attempts in range(cfg.parse_retries + 1):
        if attempts:
            request = with_reminder(prompt, attempts)
        raw = _query(backend, request, cfg.params)
        try:
            response = parse_response(raw, ws.step)
            check_fold(ws, response)
            error = None
            break
        except ParseError as exc:
            error, response = exc, None
            fold_problem = isinstance(exc, FOLD_ERRORS) or (isinstance(exc, MissingBlock) and exc.block == "fold")
        except FoldError as exc:
            error = ParseError(f"{exc.name}: {exc}", "fold")
            error.kind = exc.name
            response, fold_problem = None, True

    if response is None and fold_problem:
        response = _lenient(raw, ws.step)
    observation, env_error = act(response, tools)
    if response is not None and isinstance(response.action, FinalAnswer):
        return StepResult(prompt, raw, response, error, observation, False, ws, False, attempts)
    nxt, implicit = commit(ws, response, observation, implicit_cap=cfg.implicit_summary_cap)
    problem = validate_workspace(nxt)
    if problem is not None:
        raise InvariantBroken(f"after step {ws.step}: {problem}")
    return StepResult(prompt, raw, response, error, observation, env_error, nxt, implicit, attempts)


def structure_of(ws: Workspace) -> dict:
    return {
        "step": ws.step,
        "blocks": [[b.start, b.end] for b in ws.summaries],
        "latest_step": ws.latest.step if ws.latest is not None else None,
    }


def _error_dict(err: Optional[ParseError]) -> Optional[dict[str, str]]:
    if err is None:
        return None
    return {"kind": err.kind, "message": str(err)}


def run_episode(
    question: Question | str,
    cfg: EpisodeConfig,
    backend: ChatBackend,
    tools: ToolRegistry,
    counter: TokenCounter = DEFAULT_COUNTER,
) -> EpisodeResult:
    """Iterate steps until an answer, the turn limit, or the env-error limit."""
    if isinstance(question, str):
        question = Question(question)
    if cfg.policy == REACT:
        return _run_react(question, cfg, backend, tools, counter)

    result = EpisodeResult(Termination.TURN_LIMIT, question_id=question.qid, question=question.text, policy=FOLD)
    ws = initial_workspace(question, tools.catalog())
    while ws.step <= cfg.max_turns:
        try:
            sr = run_step(ws, backend, tools, cfg)
        except BackendError as exc:
            result.termination = Termination.BACKEND_FAILURE
            result.failure = str(exc)
            return result
        result.records.append(
            TrajectoryRecord(
                step=ws.step,
                prompt=sr.prompt.text if cfg.store_prompt else None,
                structure=structure_of(ws),
                raw_response=sr.raw,
                parsed=response_to_dict(sr.response) if sr.response is not None else None,
                observation=sr.observation,
                env_error=sr.env_error,
                token_count=counter.count(sr.prompt.text),
                block_count=ws.block_count,
                parse_error=_error_dict(sr.parse_error) if sr.response is None else None,
                implicit_fold=sr.implicit_fold,
                retries=sr.retries,
            )
        )
        if sr.done:
            result.termination = Termination.ANSWERED
            result.answer = sr.response.action.text
            return result
        if sr.env_error:
            result.env_errors += 1
            if result.env_errors > cfg.max_env_errors:
                result.termination = Termination.ERROR_LIMIT
                return result
        ws = sr.next
    if cfg.salvage_on_turn_limit:
        result.salvaged_answer = _salvage(render_context(ws, cfg.display_offset), backend, cfg, ws.step)
    return result


SALVAGE_NOTE = "The interaction budget is exhausted. Give your best final answer now in an <answer> block."


def _salvage(prompt: RenderedPrompt, backend: ChatBackend, cfg: EpisodeConfig, step: int) -> Optional[str]:
    try:
        raw = _query(backend, replace(prompt, text=prompt.text + "\n\n" + SALVAGE_NOTE), cfg.params)
        r = parse_response(raw, step, folding=False)
    except (BackendError, ParseError):
        return None
    return r.action.text if isinstance(r.action, FinalAnswer) else None


def _run_react(question: Question, cfg: EpisodeConfig, backend: ChatBackend, tools: ToolRegistry, counter: TokenCounter) -> EpisodeResult:
    result = EpisodeResult(Termination.TURN_LIMIT, question_id=question.qid, question=question.text, policy=REACT)
    catalog = tools.catalog()
    history: list[LatestInteraction] = []
    for step in range(1, cfg.max_turns + 1):
        prompt = build_react_context(question, catalog, history, cfg.display_offset)
        raw, response, error, attempts = "", None, None, 0
        try:
            for attempts in range(cfg.parse_retries + 1):
                request = prompt if attempts == 0 else with_reminder(prompt, attempts)
                raw = _query(backend, request, cfg.params)
                try:
                    response = parse_response(raw, step, folding=False)
                    error = None
                    break
                except ParseError as exc:
                    error = exc
        except BackendError as exc:
            result.termination = Termination.BACKEND_FAILURE
            result.failure = str(exc)
            return result
        observation, env_error = act(response, tools)
        result.records.append(
            TrajectoryRecord(
                step=step,
                prompt=prompt.text if cfg.store_prompt else None,
                structure={"step": step, "interactions": len(history)},
                raw_response=raw,
                parsed=response_to_dict(response) if response is not None else None,
                observation=observation,
                env_error=env_error,
                token_count=counter.count(prompt.text),
                block_count=len(history),
                parse_error=_error_dict(error) if response is None else None,
                retries=attempts,
            )
        )
        if response is not None and isinstance(response.action, FinalAnswer):
            result.termination = Termination.ANSWERED
            result.answer = response.action.text
            return result
        if env_error:
            result.env_errors += 1
            if result.env_errors > cfg.max_env_errors:
                result.termination = Termination.ERROR_LIMIT
                return result
        explanation = response.explanation if response is not None else "[unparseable response]"
        history.append(LatestInteraction(step, explanation, response.action if response else None, observation))
    if cfg.salvage_on_turn_limit:
        prompt = build_react_context(question, catalog, history, cfg.display_offset)
        result.salvaged_answer = _salvage(prompt, backend, cfg, cfg.max_turns + 1)
    return result
