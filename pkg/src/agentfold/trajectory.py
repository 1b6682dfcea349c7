"""Per-step trajectory records and their JSONL form.

A trajectory file holds one ``{"type": "step", ...}`` object per executed
step followed by a single ``{"type": "result", ...}`` summary object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional

SCHEMA_VERSION = 1


class Termination(str, Enum):
    ANSWERED = "Answered"
    TURN_LIMIT = "TurnLimit"
    ERROR_LIMIT = "ErrorLimit"
    BACKEND_FAILURE = "BackendFailure"


class SchemaViolation(ValueError):
    def __init__(self, file: str, line: int, message: str) -> None:
        super().__init__(f"{file}:{line}: {message}")
        self.file = file
        self.line = line


@dataclass
class TrajectoryRecord:
    step: int
    prompt: Optional[str]
    structure: dict[str, Any]
    raw_response: str
    parsed: Optional[dict[str, Any]]
    observation: str
    env_error: bool
    token_count: int
    block_count: int
    parse_error: Optional[dict[str, str]] = None
    implicit_fold: bool = False
    retries: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "type": "step",
            "step": self.step,
            "context_snapshot": {"prompt": self.prompt, "structure": self.structure},
            "raw_response": self.raw_response,
            "parsed": self.parsed if self.parse_error is None else {"error": self.parse_error},
            "observation": self.observation,
            "env_error": self.env_error,
            "token_count": self.token_count,
            "block_count": self.block_count,
            "implicit_fold": self.implicit_fold,
            "retries": self.retries,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "TrajectoryRecord":
        parsed = obj["parsed"]
        err = parsed.get("error") if isinstance(parsed, dict) and "error" in parsed else None
        snap = obj["context_snapshot"]
        return cls(
            step=obj["step"],
            prompt=snap.get("prompt"),
            structure=snap["structure"],
            raw_response=obj["raw_response"],
            parsed=None if err else parsed,
            observation=obj["observation"],
            env_error=obj["env_error"],
            token_count=obj["token_count"],
            block_count=obj["block_count"],
            parse_error=err,
            implicit_fold=obj.get("implicit_fold", False),
            retries=obj.get("retries", 0),
        )


@dataclass
class EpisodeResult:
    termination: Termination
    records: list[TrajectoryRecord] = field(default_factory=list)
    answer: Optional[str] = None
    question_id: str = ""
    question: str = ""
    policy: str = "fold"
    env_errors: int = 0
    salvaged_answer: Optional[str] = None
    failure: Optional[str] = None

    def summary_json(self) -> dict[str, Any]:
        return {
            "type": "result",
            "schema_version": SCHEMA_VERSION,
            "question_id": self.question_id,
            "question": self.question,
            "policy": self.policy,
            "termination": self.termination.value,
            "answer": self.answer,
            "salvaged_answer": self.salvaged_answer,
            "steps": len(self.records),
            "env_errors": self.env_errors,
            "failure": self.failure,
        }


def write_trajectory(path: str | Path, result: EpisodeResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
        fh.write(json.dumps(result.summary_json(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


_STEP_KEYS = {"step", "context_snapshot", "raw_response", "parsed", "observation", "env_error", "token_count", "block_count"}


def iter_trajectory(path: str | Path) -> Iterable[tuple[int, dict[str, Any]]]:
    """Yield ``(line number, object)`` pairs, checking each line against the schema."""
    name = str(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(name, lineno, f"invalid JSON: {exc}") from None
            kind = obj.get("type") if isinstance(obj, dict) else None
            if kind == "step":
                missing = _STEP_KEYS - set(obj)
                if missing:
                    raise SchemaViolation(name, lineno, f"step record missing {sorted(missing)}")
                if not isinstance(obj["step"], int) or not isinstance(obj["token_count"], int):
                    raise SchemaViolation(name, lineno, "step and token_count must be integers")
            elif kind == "result":
                if "termination" not in obj:
                    raise SchemaViolation(name, lineno, "result record missing termination")
            else:
                raise SchemaViolation(name, lineno, f"unknown record type {kind!r}")
            yield lineno, obj


def read_trajectory(path: str | Path) -> tuple[list[TrajectoryRecord], dict[str, Any]]:
    records: list[TrajectoryRecord] = []
    summary: Optional[dict[str, Any]] = None
    last_step = 0
    for lineno, obj in iter_trajectory(path):
        if summary is not None:
            raise SchemaViolation(str(path), lineno, "record after the result summary")
        if obj["type"] == "result":
            summary = obj
            continue
        if obj["step"] != last_step + 1:
            raise SchemaViolation(str(path), lineno, f"step {obj['step']} follows step {last_step}")
        last_step = obj["step"]
        records.append(TrajectoryRecord.from_json(obj))
    if summary is None:
        raise SchemaViolation(str(path), last_step + 1, "missing trailing result summary")
    return records, summary
