"""Command-line entry point: run, simulate, collect, analyze, compare.

Exit codes: 0 ok, 2 usage or config error, 3 backend failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import __version__
from .analytics import MismatchedCorpora, OutputUnwritable, compare_policies, export, single_report
from .backends import BackendError, GenerationParams, HttpBackend, ScriptedBackend, default_model, load_script
from .collector import CollectionConfig, OutputUnwritable as CollectUnwritable, TeacherUnavailable, collect, load_questions
from .config import ConfigError, load_config_file, resolve, write_resolved
from .engine import EpisodeConfig, run_episode
from .simenv import (
    GRANULAR,
    POLICIES,
    STEPWISE,
    FactGraph,
    SurvivalParams,
    derive_seed,
    simenv_registry,
    simulate_corpus,
    survival_expected,
    survival_monte_carlo,
)
from .toolbox import MockCorpus, ToolRegistry, mock_registry, web_registry
from .trajectory import Termination, SchemaViolation, write_trajectory
from .workspace import Question

log = logging.getLogger("agentfold")

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


RUN_DEFAULTS: dict[str, Any] = {
    "questions": None,
    "scripted": None,
    "endpoint": None,
    "model": None,
    "temperature": 0.0,
    "max_output_tokens": 4096,
    "max_turns": 100,
    "max_env_errors": 3,
    "display_offset": 0,
    "policy": "fold",
    "tools": "mock",
    "corpus": None,
    "graph": None,
    "enable_fetch": False,
    "salvage": False,
    "retries": 2,
    "backoff": 1.0,
    "timeout": 120.0,
    "out": "runs",
    "seed": 0,
    "workers": None,
}

SIMULATE_DEFAULTS: dict[str, Any] = {
    "loss": 0.01,
    "horizon": 100,
    "trials": 1_000_000,
    "policy": None,
    "seed": 0,
    "episodes": 200,
    "turns": 100,
    "nodes": None,
    "noise_chars": 800,
    "out": "sim",
    "workers": None,
    "compact": False,
}

COLLECT_DEFAULTS: dict[str, Any] = {
    "questions": None,
    "scripted": None,
    "endpoint": None,
    "model": None,
    "temperature": 0.0,
    "max_output_tokens": 4096,
    "max_turns": 100,
    "max_step_retries": 3,
    "max_env_errors": 3,
    "display_offset": 0,
    "tools": "mock",
    "corpus": None,
    "graph": None,
    "enable_fetch": False,
    "retries": 2,
    "backoff": 1.0,
    "timeout": 120.0,
    "out": "sft.jsonl",
    "seed": 0,
    "workers": None,
}

ANALYZE_DEFAULTS: dict[str, Any] = {"inputs": None, "emit": "csv,svg", "out": "analysis", "name": "corpus"}
COMPARE_DEFAULTS: dict[str, Any] = {"fold": None, "react": None, "emit": "csv,svg", "out": "comparison"}


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, *, seed: bool = True, workers: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=None, help="root seed; component seeds are derived from it")
    if workers:
        p.add_argument("--workers", type=int, default=None, help="worker pool size (default: available cores)")


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scripted", default=None, help="JSONL script fixture used instead of a live backend")
    p.add_argument("--endpoint", default=None, help="chat-completions base URL (default: $AGENTFOLD_API_BASE)")
    p.add_argument("--model", default=None, help="model id (default: $AGENTFOLD_MODEL)")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-output-tokens", type=int, default=None)
    p.add_argument("--retries", type=int, default=None, help="transport retries before giving up")
    p.add_argument("--backoff", type=float, default=None, help="backoff base in seconds")
    p.add_argument("--timeout", type=float, default=None)


def _tool_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tools", choices=["mock", "web", "simenv"], default=None)
    p.add_argument("--corpus", default=None, help="directory of .txt pages for the mock tools")
    p.add_argument("--graph", default=None, help="simenv graph JSON file for --tools simenv")
    p.add_argument("--enable-fetch", action="store_const", const=True, default=None, help="allow live page fetching")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentfold", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run episodes for a question file")
    run.add_argument("--questions", default=None, help="JSONL file of {id, question} objects")
    _backend_flags(run)
    _tool_flags(run)
    run.add_argument("--max-turns", type=int, default=None)
    run.add_argument("--max-env-errors", type=int, default=None)
    run.add_argument("--display-offset", type=int, default=None)
    run.add_argument("--policy", choices=["fold", "react"], default=None)
    run.add_argument("--salvage", action="store_const", const=True, default=None,
                     help="ask for a final answer when the turn limit is hit")
    run.add_argument("--out", default=None, help="output directory")
    _common(run)

    sim = sub.add_parser("simulate", help="synthetic episodes and the survival simulation")
    simsub = sim.add_subparsers(dest="mode", required=True)
    surv = simsub.add_parser("survival", help="Monte Carlo survival of a step-1 detail")
    surv.add_argument("--loss", type=float, default=None)
    surv.add_argument("--horizon", type=int, default=None)
    surv.add_argument("--trials", type=int, default=None)
    surv.add_argument("--policy", default=None, help="stepwise, granular, or both")
    _common(surv, workers=False)
    eps = simsub.add_parser("episodes", help="generate trajectory corpora on synthetic graphs")
    eps.add_argument("--policy", default=None, help="comma-separated subset of fold,react,stepwise")
    eps.add_argument("--episodes", type=int, default=None)
    eps.add_argument("--turns", type=int, default=None, help="max turns per episode")
    eps.add_argument("--nodes", type=int, default=None, help="graph size (default: turns + 20)")
    eps.add_argument("--noise-chars", type=int, default=None)
    eps.add_argument("--compact", action="store_const", const=True, default=None,
                     help="omit rendered prompts from trajectory files")
    eps.add_argument("--out", default=None)
    _common(eps)

    col = sub.add_parser("collect", help="collect validated SFT pairs from a teacher")
    col.add_argument("--questions", default=None)
    _backend_flags(col)
    _tool_flags(col)
    col.add_argument("--max-turns", type=int, default=None)
    col.add_argument("--max-step-retries", type=int, default=None)
    col.add_argument("--max-env-errors", type=int, default=None)
    col.add_argument("--display-offset", type=int, default=None)
    col.add_argument("--out", default=None, help="output JSONL path")
    _common(col)

    ana = sub.add_parser("analyze", help="per-turn context metrics for trajectory files")
    ana.add_argument("--in", dest="inputs", nargs="+", default=None, help="trajectory files, directories, or globs")
    ana.add_argument("--emit", default=None, help="comma-separated: csv, svg, png")
    ana.add_argument("--name", default=None, help="series name")
    ana.add_argument("--out", default=None)

    cmp_ = sub.add_parser("compare", help="compare a folding corpus with an append-only corpus")
    cmp_.add_argument("--fold", default=None, help="directory or glob of folding trajectories")
    cmp_.add_argument("--react", default=None, help="directory or glob of baseline trajectories")
    cmp_.add_argument("--emit", default=None)
    cmp_.add_argument("--out", default=None)
    return parser


# ---------------------------------------------------------------- helpers

def _expand(spec: str | Sequence[str]) -> list[Path]:
    specs = [spec] if isinstance(spec, str) else list(spec)
    paths: list[Path] = []
    for s in specs:
        p = Path(s)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.jsonl")))
        else:
            matches = sorted(glob.glob(s))
            if not matches:
                raise UsageError(f"no trajectory files match {s!r}")
            paths.extend(Path(m) for m in matches)
    return paths


def _workers(value: Optional[int]) -> int:
    return max(1, value if value else (os.cpu_count() or 1))


def _tools_factory(cfg: dict[str, Any]) -> Callable[[Question], ToolRegistry]:
    if cfg["tools"] == "simenv":
        if not cfg["graph"]:
            raise UsageError("--tools simenv requires --graph")
        graph = FactGraph.load(cfg["graph"])
        return lambda q: simenv_registry(graph)
    if cfg["tools"] == "web":
        return lambda q: web_registry(bool(cfg["enable_fetch"]))
    corpus = MockCorpus(cfg["corpus"]) if cfg["corpus"] else MockCorpus()
    return lambda q: mock_registry(corpus)


def _backend_factory(cfg: dict[str, Any]):
    if cfg["scripted"]:
        scripts = load_script(cfg["scripted"])

        def scripted(q: Question) -> ScriptedBackend:
            script = scripts.get(q.qid, scripts.get(""))
            if script is None:
                raise UsageError(f"script fixture has no entries for question {q.qid!r}")
            return ScriptedBackend(script, seed=derive_seed(cfg["seed"], q.qid))

        return scripted
    endpoint = cfg["endpoint"] or os.environ.get("AGENTFOLD_API_BASE")
    if not endpoint:
        raise UsageError("no backend: pass --scripted or --endpoint, or set AGENTFOLD_API_BASE")
    live = HttpBackend(endpoint, os.environ.get("AGENTFOLD_API_KEY"), retries=cfg["retries"],
                       backoff_base=cfg["backoff"], timeout=cfg["timeout"], display_offset=cfg["display_offset"])
    return lambda q: live


def _params(cfg: dict[str, Any]) -> GenerationParams:
    model = cfg["model"] or ("scripted" if cfg["scripted"] else default_model())
    return GenerationParams(model, cfg["temperature"], cfg["max_output_tokens"])


def _write_meta(out_dir: Path, command: str) -> None:
    meta = {"command": command, "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "version": __version__}
    (out_dir / "run-meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_run(cfg: dict[str, Any]) -> int:
    if not cfg["questions"]:
        raise UsageError("run requires --questions")
    questions = load_questions(cfg["questions"])
    ecfg = EpisodeConfig(max_turns=cfg["max_turns"], max_env_errors=cfg["max_env_errors"],
                         display_offset=cfg["display_offset"], policy=cfg["policy"], params=_params(cfg),
                         salvage_on_turn_limit=bool(cfg["salvage"]))
    backends = _backend_factory(cfg)
    tools = _tools_factory(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    _write_meta(out, "run")

    def one(q: Question):
        return run_episode(q, ecfg, backends(q), tools(q))

    with ThreadPoolExecutor(max_workers=_workers(cfg["workers"])) as pool:
        results = list(pool.map(one, questions))
    failed = False
    with open(out / "summary.jsonl", "w", encoding="utf-8") as fh:
        for q, res in zip(questions, results):
            write_trajectory(out / "trajectories" / f"{q.qid}.jsonl", res)
            fh.write(json.dumps(res.summary_json(), sort_keys=True) + "\n")
            failed |= res.termination == Termination.BACKEND_FAILURE
            if res.failure:
                print(f"question {q.qid}: backend failure: {res.failure}", file=sys.stderr)
    print(f"{len(results)} episodes written to {out}")
    return EXIT_BACKEND if failed else EXIT_OK


def cmd_simulate(cfg: dict[str, Any], mode: str) -> int:
    if mode == "survival":
        if cfg["trials"] < 1 or cfg["horizon"] < 1 or not 0 <= cfg["loss"] <= 1:
            raise UsageError("need --trials >= 1, --horizon >= 1 and 0 <= --loss <= 1")
        policy = cfg["policy"] or "both"
        which = [STEPWISE, GRANULAR] if policy == "both" else [policy]
        if any(w not in (STEPWISE, GRANULAR) for w in which):
            raise UsageError("--policy must be stepwise, granular, or both")
        params = SurvivalParams(cfg["loss"], cfg["horizon"], cfg["trials"], cfg["seed"])
        for w in which:
            rate = survival_monte_carlo(params, w)
            expected = survival_expected(params.loss_prob, params.horizon, w)
            band = 3 * math.sqrt(max(expected * (1 - expected), 1e-300) / params.trials)
            print(f"{w}\tloss={params.loss_prob}\thorizon={params.horizon}\ttrials={params.trials}"
                  f"\tsurvival={rate:.5f}\texpected={expected:.5f}\tband=+/-{band:.5f}")
        return EXIT_OK
    policies = [p.strip() for p in (cfg["policy"] or "fold,react").split(",") if p.strip()]
    if not policies or any(p not in POLICIES for p in policies):
        raise UsageError(f"--policy must be a comma-separated subset of {','.join(POLICIES)}")
    if cfg["episodes"] < 1 or cfg["turns"] < 1:
        raise UsageError("--episodes and --turns must be >= 1")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    _write_meta(out, "simulate episodes")
    simulate_corpus(cfg["seed"], cfg["episodes"], cfg["turns"], policies, n_nodes=cfg["nodes"],
                    noise_chars=cfg["noise_chars"], out_dir=out, workers=_workers(cfg["workers"]),
                    store_prompt=not cfg["compact"])
    for p in policies:
        print(f"{p}: {cfg['episodes']} trajectories in {out / p}")
    return EXIT_OK


def cmd_collect(cfg: dict[str, Any]) -> int:
    if not cfg["questions"]:
        raise UsageError("collect requires --questions")
    questions = load_questions(cfg["questions"])
    ccfg = CollectionConfig(questions, _backend_factory(cfg), _tools_factory(cfg), cfg["out"],
                            max_step_retries=cfg["max_step_retries"], max_env_errors=cfg["max_env_errors"],
                            max_turns=cfg["max_turns"], display_offset=cfg["display_offset"],
                            params=_params(cfg), workers=_workers(cfg["workers"]))
    report = collect(ccfg)
    out = Path(cfg["out"])
    (out.parent / (out.stem + ".report.json")).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def _formats(emit: str) -> list[str]:
    fmts = [f.strip() for f in emit.split(",") if f.strip()]
    if not fmts or any(f not in ("csv", "svg", "png") for f in fmts):
        raise UsageError("--emit must be a comma-separated subset of csv,svg,png")
    return fmts


def cmd_analyze(cfg: dict[str, Any]) -> int:
    if not cfg["inputs"]:
        raise UsageError("analyze requires --in")
    report = single_report(_expand(cfg["inputs"]), name=cfg["name"])
    for p in export(report, _formats(cfg["emit"]), cfg["out"]):
        print(p)
    return EXIT_OK


def cmd_compare(cfg: dict[str, Any]) -> int:
    if not cfg["fold"] or not cfg["react"]:
        raise UsageError("compare requires --fold and --react")
    report = compare_policies(_expand(cfg["fold"]), _expand(cfg["react"]))
    for m, d in sorted(report.deltas.items()):
        print(f"turn {m}: fold context {d['percent']:.1f}% smaller ({d['absolute']:.0f} tokens)")
    for p in export(report, _formats(cfg["emit"]), cfg["out"]):
        print(p)
    return EXIT_OK


DEFAULTS = {
    "run": RUN_DEFAULTS,
    "simulate": SIMULATE_DEFAULTS,
    "collect": COLLECT_DEFAULTS,
    "analyze": ANALYZE_DEFAULTS,
    "compare": COMPARE_DEFAULTS,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "mode", "config", "verbose")}
    try:
        known = DEFAULTS[args.command]
        file_values = load_config_file(args.config, args.command, set(known), set().union(*DEFAULTS.values()))
        cfg = resolve(known, file_values, flags)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.mode)
        if args.command == "collect":
            return cmd_collect(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        return cmd_compare(cfg)
    except (UsageError, ConfigError, MismatchedCorpora) as exc:
        parser.print_usage(sys.stderr)
        print(f"agentfold: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, SchemaViolation) as exc:
        print(f"agentfold: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, TeacherUnavailable) as exc:
        print(f"agentfold: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, OutputUnwritable, CollectUnwritable) as exc:
        print(f"agentfold: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
