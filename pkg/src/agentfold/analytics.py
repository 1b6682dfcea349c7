"""Context-dynamics metrics over trajectory files.

Turns are 0-based: turn ``t`` is the context presented after ``t`` completed
interactions, i.e. the record with ``step == t + 1``. A trajectory survives
to turn ``t`` when it has more than ``t`` turns (a record at that turn).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from .tokens import DEFAULT_COUNTER, ApproxCounter, TokenCounter, TokenizerCounter
from .trajectory import iter_trajectory

__all__ = [
    "ApproxCounter",
    "TokenizerCounter",
    "TurnAggregate",
    "ComparisonReport",
    "MismatchedCorpora",
    "compute_aggregates",
    "compare_policies",
    "export",
]

MILESTONES = (10, 50, 100)


class MismatchedCorpora(ValueError):
    pass


class OutputUnwritable(OSError):
    pass


@dataclass(frozen=True)
class TurnAggregate:
    turn: int
    surviving: int
    mean_tokens: float
    mean_blocks: float


@dataclass
class ComparisonReport:
    series: dict[str, list[TurnAggregate]]
    deltas: dict[int, dict[str, float]] = field(default_factory=dict)
    counter: str = DEFAULT_COUNTER.name

    def at(self, policy: str, turn: int) -> Optional[TurnAggregate]:
        for a in self.series[policy]:
            if a.turn == turn:
                return a
        return None


def _blocks_from_structure(structure: dict[str, Any]) -> int:
    if "interactions" in structure:
        return int(structure["interactions"])
    return len(structure.get("blocks", [])) + (1 if structure.get("latest_step") is not None else 0)


def _tokens(obj: dict[str, Any], counter: TokenCounter) -> int:
    prompt = obj["context_snapshot"].get("prompt")
    if prompt is None:
        # compact corpora store only the writer's count
        return int(obj["token_count"])
    return counter.count(prompt)


def compute_aggregates(trajs: Iterable[str | Path], counter: TokenCounter = DEFAULT_COUNTER) -> list[TurnAggregate]:
    """Per-turn surviving count, mean token count A_t, and mean block count."""
    tok_sum: dict[int, int] = {}
    blk_sum: dict[int, int] = {}
    alive: dict[int, int] = {}
    for path in trajs:
        for _, obj in iter_trajectory(path):
            if obj["type"] != "step":
                continue
            t = obj["step"] - 1
            tok_sum[t] = tok_sum.get(t, 0) + _tokens(obj, counter)
            blk_sum[t] = blk_sum.get(t, 0) + _blocks_from_structure(obj["context_snapshot"]["structure"])
            alive[t] = alive.get(t, 0) + 1
    return [TurnAggregate(t, alive[t], tok_sum[t] / alive[t], blk_sum[t] / alive[t]) for t in sorted(alive)]


def _question_ids(paths: Sequence[str | Path]) -> list[str]:
    ids = []
    for path in paths:
        for _, obj in iter_trajectory(path):
            if obj["type"] == "result":
                ids.append(str(obj.get("question_id", "")))
    return sorted(ids)


def compare_policies(
    fold_trajs: Sequence[str | Path],
    react_trajs: Sequence[str | Path],
    counter: TokenCounter = DEFAULT_COUNTER,
    milestones: Sequence[int] = MILESTONES,
    names: tuple[str, str] = ("fold", "react"),
) -> ComparisonReport:
    """Per-turn series for both corpora and the reduction at each milestone turn."""
    if _question_ids(fold_trajs) != _question_ids(react_trajs):
        raise MismatchedCorpora("the two corpora do not cover the same question ids")
    a, b = names
    report = ComparisonReport({a: compute_aggregates(fold_trajs, counter), b: compute_aggregates(react_trajs, counter)},
                              counter=counter.name)
    for m in milestones:
        fa, ra = report.at(a, m), report.at(b, m)
        if fa is None or ra is None:
            continue
        diff = ra.mean_tokens - fa.mean_tokens
        report.deltas[m] = {
            "absolute": diff,
            "percent": 100.0 * diff / ra.mean_tokens if ra.mean_tokens else 0.0,
        }
    return report


def single_report(trajs: Sequence[str | Path], counter: TokenCounter = DEFAULT_COUNTER, name: str = "corpus") -> ComparisonReport:
    return ComparisonReport({name: compute_aggregates(trajs, counter)}, counter=counter.name)


CSV_COLUMNS = ("policy", "turn", "surviving", "mean_tokens", "mean_blocks")


def to_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for policy, series in report.series.items():
        for a in series:
            w.writerow((policy, a.turn, a.surviving, f"{a.mean_tokens:.4f}", f"{a.mean_blocks:.4f}"))
    return buf.getvalue()


def deltas_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("turn", "absolute_reduction", "percent_reduction"))
    for m, d in sorted(report.deltas.items()):
        w.writerow((m, f"{d['absolute']:.4f}", f"{d['percent']:.4f}"))
    return buf.getvalue()


def export(report: ComparisonReport, formats: Iterable[str], out_dir: str | Path) -> list[Path]:
    """Write ``aggregates.csv`` (+ ``deltas.csv``) and/or SVG curves. Returns the paths written."""
    formats = set(formats)
    unknown = formats - {"csv", "svg", "png"}
    if unknown:
        raise ValueError(f"unknown export formats: {sorted(unknown)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputUnwritable(f"cannot create {out}: {exc}") from exc
    written: list[Path] = []
    try:
        if "csv" in formats:
            p = out / "aggregates.csv"
            p.write_text(to_csv(report), encoding="utf-8")
            written.append(p)
            if report.deltas:
                p = out / "deltas.csv"
                p.write_text(deltas_csv(report), encoding="utf-8")
                written.append(p)
        for fmt in sorted(formats & {"svg", "png"}):
            from . import plotting

            written.extend(plotting.render_report(report, out, fmt))
    except OSError as exc:
        raise OutputUnwritable(f"cannot write into {out}: {exc}") from exc
    return written
