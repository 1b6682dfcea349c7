"""Chat backends: an OpenAI-compatible HTTP client and a scripted replayer."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Sequence, Union

import httpx

from .protocol import AgentResponse, RenderedPrompt, response_from_dict, serialize_response, system_template

log = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    def __init__(self, message: str, status: Optional[int] = None) -> None:
        super().__init__(message)
        self.status = status


class AuthRejected(BackendError):
    pass


class QuotaExceeded(BackendError):
    pass


class BackendFailure(BackendError):
    """Raised once retries are exhausted; wraps the last underlying error."""

    def __init__(self, message: str, cause: Optional[BackendError] = None, retries: int = 0) -> None:
        super().__init__(message)
        self.cause = cause
        self.retries = retries


class ScriptExhausted(BackendError):
    pass


@dataclass(frozen=True)
class GenerationParams:
    model_id: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 4096
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


class ChatBackend(Protocol):
    def complete(self, prompt: RenderedPrompt, params: GenerationParams) -> str: ...


# ---------------------------------------------------------------- HTTP

def build_request(prompt: RenderedPrompt, params: GenerationParams, system: Optional[str] = None) -> dict[str, Any]:
    body: dict[str, Any] = {
        "model": params.model_id,
        "messages": [
            {"role": "system", "content": system if system is not None else system_template()},
            {"role": "user", "content": prompt.text},
        ],
        "temperature": params.temperature,
        "max_tokens": params.max_output_tokens,
    }
    if params.stop_sequences:
        body["stop"] = list(params.stop_sequences)
    return body


def http_complete(
    endpoint: str,
    params: GenerationParams,
    prompt: RenderedPrompt,
    *,
    api_key: Optional[str] = None,
    client: Optional[httpx.Client] = None,
    timeout: float = 120.0,
    system: Optional[str] = None,
) -> str:
    """One chat-completions request. Raises TransportError / AuthRejected / QuotaExceeded."""
    url = endpoint.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.post(url, headers=headers, json=build_request(prompt, params, system), timeout=timeout)
    except httpx.TimeoutException as exc:
        raise TransportError(f"timeout: {exc}") from None
    except httpx.HTTPError as exc:
        raise TransportError(f"transport error: {exc}") from None
    finally:
        if own:
            client.close()
    if resp.status_code in (401, 403):
        raise AuthRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
    if resp.status_code == 429:
        raise QuotaExceeded(f"HTTP 429: {resp.text[:200]}")
    if resp.status_code >= 400:
        raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
    try:
        return resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed response body: {exc}", resp.status_code) from None


class HttpBackend:
    """OpenAI-compatible chat backend with retries and an in-flight cap."""

    def __init__(
        self,
        endpoint: str,
        api_key: Optional[str] = None,
        *,
        retries: int = 2,
        backoff_base: float = 1.0,
        timeout: float = 120.0,
        max_in_flight: int = 8,
        display_offset: int = 0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.endpoint = endpoint
        self.system = system_template(display_offset)
        self.api_key = api_key
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._local = threading.local()

    @classmethod
    def from_env(cls, **kwargs: Any) -> "HttpBackend":
        base = os.environ.get("AGENTFOLD_API_BASE")
        if not base:
            raise BackendError("AGENTFOLD_API_BASE is not set")
        return cls(base, os.environ.get("AGENTFOLD_API_KEY"), **kwargs)

    @property
    def last_retry_count(self) -> int:
        return getattr(self._local, "retries", 0)

    def complete(self, prompt: RenderedPrompt, params: GenerationParams) -> str:
        last: Optional[BackendError] = None
        for attempt in range(self.retries + 1):
            self._local.retries = attempt
            if attempt:
                self.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                with self._slots:
                    return http_complete(
                        self.endpoint, params, prompt, api_key=self.api_key, client=self._client,
                        timeout=self.timeout, system=self.system,
                    )
            except AuthRejected:
                raise
            except (TransportError, QuotaExceeded) as exc:
                log.warning("backend attempt %d failed: %s", attempt + 1, exc)
                last = exc
        raise BackendFailure(f"backend failed after {self.retries} retries: {last}", last, self.retries)

    def close(self) -> None:
        self._client.close()


def default_model() -> str:
    return os.environ.get("AGENTFOLD_MODEL", "agentfold")


# ---------------------------------------------------------------- scripted

ScriptEntry = Union[AgentResponse, str, Sequence[Union[AgentResponse, str]]]
ScriptFn = Callable[[int, int], Union[AgentResponse, str]]


def _render_entry(entry: AgentResponse | str) -> str:
    return entry if isinstance(entry, str) else serialize_response(entry)


@dataclass
class ScriptedBackend:
    """Replays a fixed script keyed by step (1-based).

    An entry may be a response, raw completion text, or a list of
    alternatives indexed by resample attempt (the last one repeats). A
    callable ``fn(step, seed)`` may be given instead of a list.
    """

    script: Sequence[ScriptEntry] = ()
    fn: Optional[ScriptFn] = None
    seed: int = 0
    calls: int = field(default=0, compare=False)

    def entry_text(self, step: int, attempt: int = 0) -> str:
        if self.fn is not None:
            return _render_entry(self.fn(step, self.seed))
        if step < 1 or step > len(self.script):
            raise ScriptExhausted(f"script has {len(self.script)} entries; step {step} requested")
        entry = self.script[step - 1]
        if isinstance(entry, (AgentResponse, str)):
            return _render_entry(entry)
        alternatives = list(entry)
        return _render_entry(alternatives[min(attempt, len(alternatives) - 1)])

    def complete(self, prompt: RenderedPrompt, params: GenerationParams) -> str:
        self.calls += 1
        return self.entry_text(prompt.step, prompt.attempt)


def scripted_complete(backend: ScriptedBackend, step: int) -> str:
    return backend.entry_text(step)


def load_script(path: str | Path) -> dict[str, list[ScriptEntry]]:
    """Load a JSONL script fixture.

    Each line is either ``{"completion": "<raw text>"}`` or a structured
    response object (thinking/fold/explanation/action). ``"alternatives"``
    holds a list of either form. Lines may carry ``"question_id"`` to give
    each question its own script; lines without it go under ``""``.
    """
    scripts: dict[str, list[ScriptEntry]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            qid = str(obj.get("question_id", ""))
            if "alternatives" in obj:
                entry: ScriptEntry = [_entry_from_obj(o) for o in obj["alternatives"]]
            else:
                entry = _entry_from_obj(obj)
            scripts.setdefault(qid, []).append(entry)
    return scripts


def _entry_from_obj(obj: dict[str, Any]) -> AgentResponse | str:
    if "completion" in obj:
        return str(obj["completion"])
    return response_from_dict(obj)
