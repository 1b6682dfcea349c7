"""Deterministic synthetic web, scripted policies, and the survival simulation.

A generated :class:`FactGraph` is a main trail of pages ending at a goal page,
with dead-end side branches hanging off it. Scripted policies walk the trail
(exploring every side branch until it dead-ends) and differ only in how they
manage context:

* ``fold``: condense each step granularly, merge consecutive routine hops,
  collapse a side branch into one block once it dead-ends, and package the
  whole segment into one block when a key finding is reached. Every
  ``chapter_every`` segments are merged (with the previous chapter) into a
  single coarse block that keeps only the key findings.
* ``react``: no folding; the engine runs the append-only baseline.
* ``stepwise``: re-summarize the entire history into one block every step.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .backends import ScriptedBackend
from .engine import FOLD, REACT, EpisodeConfig, run_episode
from .protocol import AgentResponse
from .tokens import DEFAULT_COUNTER, TokenCounter
from .toolbox import SEARCH, VISIT, ToolError, ToolRegistry
from .trajectory import EpisodeResult, write_trajectory
from .workspace import FinalAnswer, FoldDirective, Question, ToolCall

STEPWISE = "stepwise"
POLICIES = (FOLD, REACT, STEPWISE)

_WORDS = (
    "archive report index ledger survey annex memo bulletin registry digest "
    "catalog record notice gazette journal review summary minutes brief dossier "
    "the of and a in to for with on by from at as is was were that this"
).split()


def derive_seed(root: int, label: str) -> int:
    """Per-component seed: first 8 bytes of sha256("<root>:<label>")."""
    return int.from_bytes(hashlib.sha256(f"{root}:{label}".encode()).digest()[:8], "big")


@dataclass
class FactGraph:
    seed: int
    nodes: dict[str, str]
    edges: dict[str, list[str]]
    goal: str
    entries: list[str]
    main: list[str]
    branches: list[tuple[int, list[str]]]  # (main index the branch hangs off, node ids)
    keys: dict[str, str]  # key node id -> finding
    answer: str
    noise_chars: int = 0

    @property
    def question(self) -> str:
        return (
            f"Starting from a web search, follow the trail of linked pages (puzzle {self.seed % 100000}) "
            "and report the answer token stated on the final page."
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "nodes": self.nodes,
            "edges": self.edges,
            "goal": self.goal,
            "entries": self.entries,
            "main": self.main,
            "branches": [[i, ids] for i, ids in self.branches],
            "keys": self.keys,
            "answer": self.answer,
            "noise_chars": self.noise_chars,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "FactGraph":
        return cls(
            seed=obj["seed"],
            nodes=dict(obj["nodes"]),
            edges={k: list(v) for k, v in obj["edges"].items()},
            goal=obj["goal"],
            entries=list(obj["entries"]),
            main=list(obj["main"]),
            branches=[(int(i), list(ids)) for i, ids in obj["branches"]],
            keys=dict(obj["keys"]),
            answer=obj["answer"],
            noise_chars=obj.get("noise_chars", 0),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FactGraph":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def reachable(self, start: str) -> set[str]:
        seen, stack = set(), [start]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.edges.get(n, []))
        return seen


def _filler(rng: np.random.Generator, n: int) -> str:
    if n <= 0:
        return ""
    words = rng.choice(_WORDS, size=n // 3 + 2)
    return " ".join(words)[:n]


def _token(rng: np.random.Generator) -> str:
    return "".join(rng.choice(list("ABCDEFGHJKLMNPQRSTUVWXYZ23456789"), size=6))


def _page(node: str, fact: str, links: Sequence[str], noise_chars: int, rng: np.random.Generator) -> str:
    head = f"Page sim://{node}. {fact} Links: {', '.join(f'sim://{x}' for x in links) or 'none'}.\n"
    return head + _filler(rng, noise_chars - len(head))


def generate_graph(
    seed: int,
    n_nodes: int,
    noise_chars: int = 800,
    *,
    decoy_every: int = 10,
    decoy_len: int = 3,
    key_every: int = 10,
) -> FactGraph:
    """Deterministic trail graph; page texts are padded to ``noise_chars`` characters."""
    if n_nodes < 2:
        raise ValueError("n_nodes must be >= 2")
    rng = np.random.default_rng(seed)
    n_branches = n_nodes // decoy_every if decoy_every > 0 else 0
    while n_branches and n_nodes - n_branches * decoy_len < 2:
        n_branches -= 1
    main_len = n_nodes - n_branches * decoy_len
    ids = [f"n{int(x)}" for x in rng.permutation(n_nodes)]
    main, rest = ids[:main_len], ids[main_len:]
    attach = sorted(int(x) for x in rng.integers(0, max(1, main_len - 1), size=n_branches))
    branches = [(a, rest[i * decoy_len:(i + 1) * decoy_len]) for i, a in enumerate(attach)]

    edges: dict[str, list[str]] = {n: [] for n in ids}
    for i in range(main_len - 1):
        edges[main[i]].append(main[i + 1])
    for a, b in branches:
        edges[main[a]].append(b[0])
        for x, y in zip(b, b[1:]):
            edges[x].append(y)

    answer = _token(rng)
    keys: dict[str, str] = {}
    facts: dict[str, str] = {}
    for i, n in enumerate(main):
        if i == main_len - 1:
            facts[n] = f"FINAL: the answer token is {answer}."
            keys[n] = f"answer token {answer}"
        elif (i + 1) % key_every == 0:
            clue = _token(rng)
            facts[n] = f"KEY FINDING: clue {clue} confirms the trail continues."
            keys[n] = f"clue {clue}"
        else:
            facts[n] = f"Record {n} notes that the trail continues."
    for _, b in branches:
        for n in b:
            facts[n] = f"Record {n} is unrelated to the question."
    nodes = {n: _page(n, facts[n], edges[n], noise_chars, rng) for n in ids}
    entries = [main[0]] + [b[0] for _, b in branches[:2]]
    return FactGraph(seed, nodes, edges, main[-1], entries, main, branches, keys, answer, noise_chars)


# ---------------------------------------------------------------- tools

def simenv_registry(graph: FactGraph) -> ToolRegistry:
    def search(args: dict[str, Any]) -> str:
        lines = [f"Search results for {args['query']!r}:"]
        for i, n in enumerate(graph.entries, 1):
            lines.append(f"{i}. sim://{n} - {graph.nodes[n].splitlines()[0][:80]}")
        head = "\n".join(lines) + "\n"
        rng = np.random.default_rng(derive_seed(graph.seed, "search:" + args["query"]))
        return head + _filler(rng, graph.noise_chars - len(head))

    def visit(args: dict[str, Any]) -> str:
        url = args["url"]
        node = url[len("sim://"):] if url.startswith("sim://") else url
        if node not in graph.nodes:
            raise ToolError("Transport", f"404 not found: {url}")
        return graph.nodes[node]

    return ToolRegistry({"search": (SEARCH, search), "visit": (VISIT, visit)})


# ---------------------------------------------------------------- policies

@dataclass(frozen=True)
class PlannedStep:
    kind: str  # search | main | key | decoy | deadend
    node: str = ""
    branch_root: str = ""
    next_node: str = ""


def traversal(graph: FactGraph) -> list[PlannedStep]:
    """Visit order of the scripted traversal, excluding the final answer step."""
    plan = [PlannedStep("search", next_node=graph.main[0])]
    by_attach: dict[int, list[list[str]]] = {}
    for a, b in graph.branches:
        by_attach.setdefault(a, []).append(b)
    for i, n in enumerate(graph.main):
        nxt = graph.main[i + 1] if i + 1 < len(graph.main) else ""
        kind = "key" if n in graph.keys else "main"
        branch_list = by_attach.get(i, [])
        first_next = branch_list[0][0] if branch_list else nxt
        plan.append(PlannedStep(kind, n, next_node=first_next))
        for j, b in enumerate(branch_list):
            after = branch_list[j + 1][0] if j + 1 < len(branch_list) else nxt
            for m, d in enumerate(b):
                last = m == len(b) - 1
                plan.append(PlannedStep("deadend" if last else "decoy", d, n, after if last else b[m + 1]))
    return plan


@dataclass
class _Block:
    start: int
    end: int
    tag: str
    first: str = ""
    findings: tuple[str, ...] = ()


@dataclass
class OraclePolicy:
    """Scripted responses for one graph; the whole script is planned up front."""

    graph: FactGraph
    policy: str = FOLD
    chapter_every: int = 4
    script: list[AgentResponse] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        self.script = self._build()

    def _action(self, plan: list[PlannedStep], idx: int) -> tuple[str, ToolCall | FinalAnswer]:
        if idx == 0:
            return "Start with a web search for the puzzle.", ToolCall("search", {"query": self.graph.question})
        if idx == len(plan):
            return "The final page states the answer token.", FinalAnswer(self.graph.answer)
        prev, target = plan[idx - 1], plan[idx].node
        if prev.kind == "deadend":
            why = f"That side branch was a dead end; resume the trail at {target}."
        elif plan[idx].kind in ("decoy", "deadend") and prev.kind != "decoy":
            why = f"Check the side link {target} before moving on."
        else:
            why = f"Follow the link to {target}."
        return why, ToolCall("visit", {"url": f"sim://{target}"})

    def _build(self) -> list[AgentResponse]:
        plan = traversal(self.graph)
        blocks: list[_Block] = []
        script: list[AgentResponse] = []
        seen = 0
        keys: list[str] = []
        dead = 0
        for idx in range(len(plan) + 1):
            t = idx + 1
            fold = None
            if t >= 2:
                done = plan[idx - 1]
                seen += done.kind != "search"
                if done.kind == "key":
                    keys.append(self.graph.keys[done.node])
                if done.kind == "deadend":
                    dead += 1
                if self.policy == FOLD:
                    fold = self._fold(blocks, t, done)
                elif self.policy == STEPWISE:
                    summary = (
                        f"Searched once and opened {seen} pages; trail reached {done.node or self.graph.main[0]}; "
                        f"{dead} dead-end branches; findings: {'; '.join(keys) or 'none yet'}."
                    )
                    fold = FoldDirective(1, t - 1, summary)
            explanation, action = self._action(plan, idx)
            script.append(AgentResponse(f"Step {t}: decide what to keep and where to go next.", fold, explanation, action))
        return script

    def _fold(self, blocks: list[_Block], t: int, done: PlannedStep) -> FoldDirective:
        last = blocks[-1] if blocks else None
        k, tag, first = t - 1, done.kind, done.node
        findings: tuple[str, ...] = ()
        if done.kind == "search":
            tag, summary = "anchor", f"Searched the puzzle; entry page {done.next_node}."
        elif done.kind == "decoy":
            summary = f"Side page {done.node} off {done.branch_root}: nothing relevant."
        elif done.kind == "deadend":
            i = len(blocks)
            while i > 0 and blocks[i - 1].tag == "decoy":
                i -= 1
            if i < len(blocks):
                k, first = blocks[i].start, blocks[i].first
            summary = f"Dead end: side branch {first}..{done.node} off {done.branch_root} has no lead."
        elif done.kind == "main":
            if last is not None and last.tag == "main":
                k, first = last.start, last.first
            summary = f"Followed trail {first}..{done.node}; next lead {done.next_node}." if first != done.node else (
                f"Followed trail {done.node}; next lead {done.next_node}."
            )
        else:  # key finding closes the current segment
            i = len(blocks)
            while i > 0 and blocks[i - 1].tag not in ("anchor", "segment", "chapter"):
                i -= 1
            if i < len(blocks):
                k, first = blocks[i].start, blocks[i].first
            finding = self.graph.keys[done.node]
            j = i
            while j > 0 and blocks[j - 1].tag == "segment":
                j -= 1
            if self.chapter_every > 0 and i - j + 1 >= self.chapter_every:
                if j > 0 and blocks[j - 1].tag == "chapter":
                    j -= 1
                findings = tuple(f for b in blocks[j:i] for f in b.findings) + (finding,)
                k, first, tag = blocks[j].start, blocks[j].first, "chapter"
                summary = f"Trail {first}..{done.node} covered; key findings: {', '.join(findings)}."
            else:
                findings, tag = (finding,), "segment"
                summary = f"Segment {first}..{done.node} done; key finding at {done.node}: {finding}."
        while blocks and blocks[-1].start >= k:
            blocks.pop()
        blocks.append(_Block(k, t - 1, tag, first, findings))
        return FoldDirective(k, t - 1, summary)


def run_policy_episode(
    graph: FactGraph,
    policy: str,
    max_turns: int,
    *,
    qid: str = "",
    counter: TokenCounter = DEFAULT_COUNTER,
    store_prompt: bool = True,
) -> EpisodeResult:
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    oracle = OraclePolicy(graph, policy)
    cfg = EpisodeConfig(max_turns=max_turns, policy=REACT if policy == REACT else FOLD, store_prompt=store_prompt)
    result = run_episode(Question(graph.question, qid), cfg, ScriptedBackend(oracle.script), simenv_registry(graph), counter)
    result.policy = policy
    return result


def _episode_job(args: tuple) -> tuple[str, int, EpisodeResult]:
    root_seed, index, policy, n_nodes, noise_chars, max_turns, store_prompt = args
    graph = generate_graph(derive_seed(root_seed, f"graph/{index}"), n_nodes, noise_chars)
    res = run_policy_episode(graph, policy, max_turns, qid=f"sim-{index:04d}", store_prompt=store_prompt)
    return policy, index, res


def simulate_corpus(
    seed: int,
    episodes: int,
    max_turns: int,
    policies: Iterable[str] = (FOLD, REACT),
    *,
    n_nodes: Optional[int] = None,
    noise_chars: int = 800,
    out_dir: Optional[str | Path] = None,
    workers: int = 1,
    store_prompt: bool = True,
) -> dict[str, list[EpisodeResult]]:
    """Run ``episodes`` graphs under each policy; identical graphs across policies.

    Graph ``i`` uses seed ``derive_seed(seed, "graph/i")`` so results do not
    depend on the worker count. With ``out_dir`` each episode is written to
    ``<out_dir>/<policy>/ep<i>.jsonl``.
    """
    n_nodes = n_nodes or max_turns + 20
    jobs = [(seed, i, p, n_nodes, noise_chars, max_turns, store_prompt) for p in policies for i in range(episodes)]
    out: dict[str, list[EpisodeResult]] = {p: [None] * episodes for p in policies}  # type: ignore[misc]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_episode_job, jobs, chunksize=4))
    else:
        done = [_episode_job(j) for j in jobs]
    for policy, index, res in done:
        out[policy][index] = res
        if out_dir is not None:
            write_trajectory(Path(out_dir) / policy / f"ep{index:04d}.jsonl", res)
    return out


def fact_survives(context: str, token: str) -> bool:
    return token in context


# ---------------------------------------------------------------- survival

GRANULAR = "granular"


@dataclass(frozen=True)
class SurvivalParams:
    loss_prob: float
    horizon: int
    trials: int
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def survival_monte_carlo(p: SurvivalParams, policy: str = STEPWISE, *, chunk_cells: int = 20_000_000) -> float:
    """Fraction of trials in which a step-1 detail survives.

    Stepwise exposes the detail to ``horizon`` independent loss events (one
    per full re-summarization); granular folding exposes it to exactly one.
    Trials run in fixed-size chunks with seeds spawned from ``p.seed``.
    """
    if policy not in (STEPWISE, GRANULAR):
        raise ValueError(f"unknown survival policy {policy!r}")
    events = p.horizon if policy == STEPWISE else 1
    per_chunk = max(1, chunk_cells // events)
    n_chunks = -(-p.trials // per_chunk)
    seeds = np.random.SeedSequence(p.seed).spawn(n_chunks)
    survived = 0
    remaining = p.trials
    for ss in seeds:
        n = min(per_chunk, remaining)
        rng = np.random.default_rng(ss)
        lost = (rng.random((n, events)) < p.loss_prob).any(axis=1)
        survived += int(n - lost.sum())
        remaining -= n
    return survived / p.trials


def survival_expected(loss_prob: float, horizon: int, policy: str = STEPWISE) -> float:
    return (1.0 - loss_prob) ** (horizon if policy == STEPWISE else 1)
