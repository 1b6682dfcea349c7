from __future__ import annotations

import json
import subprocess
import sys

import pytest

from agentfold.cli import main
from agentfold.simenv import generate_graph
from agentfold.trajectory import read_trajectory

from conftest import FIXTURES, load_case_study

RUN_BASE = ["run", "--questions", str(FIXTURES / "questions.jsonl"), "--scripted", str(FIXTURES / "golden.jsonl"),
            "--corpus", str(FIXTURES / "corpus")]


def test_run_with_scripted_fixture(tmp_path, capsys):
    assert main(RUN_BASE + ["--max-turns", "100", "--out", str(tmp_path)]) == 0
    records, summary = read_trajectory(tmp_path / "trajectories" / "case-1.jsonl")
    assert summary["termination"] == "Answered" and len(records) == 35
    rows = load_case_study()
    assert all(label in rec.prompt for rec, row in zip(records, rows) for label in row)
    lines = (tmp_path / "summary.jsonl").read_text().splitlines()
    assert [json.loads(l)["question_id"] for l in lines] == ["case-1", "case-2"]
    resolved = json.loads((tmp_path / "config.resolved.json").read_text())
    assert resolved["max_turns"] == 100 and resolved["policy"] == "fold"
    assert "started_at" in json.loads((tmp_path / "run-meta.json").read_text())


def test_run_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(RUN_BASE + ["--out", str(tmp_path / name), "--workers", "2"]) == 0
    for f in ("trajectories/case-1.jsonl", "trajectories/case-2.jsonl", "summary.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_run_turn_limit(tmp_path):
    assert main(RUN_BASE + ["--max-turns", "10", "--out", str(tmp_path)]) == 0
    records, summary = read_trajectory(tmp_path / "trajectories" / "case-1.jsonl")
    assert summary["termination"] == "TurnLimit" and len(records) == 10


def test_run_react_policy(tmp_path):
    assert main(RUN_BASE + ["--policy", "react", "--out", str(tmp_path)]) == 0
    records, _ = read_trajectory(tmp_path / "trajectories" / "case-1.jsonl")
    assert [r.block_count for r in records] == list(range(35))


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "agentfold.toml"
    cfg.write_text('max_turns = 5\n[run]\nmax_turns = 7\ndisplay_offset = 1\n')
    out = tmp_path / "o"
    assert main(["--config", str(cfg)] + RUN_BASE + ["--out", str(out)]) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["max_turns"] == 7 and resolved["display_offset"] == 1
    assert main(["--config", str(cfg)] + RUN_BASE + ["--out", str(out), "--max-turns", "3"]) == 0
    assert json.loads((out / "config.resolved.json").read_text())["max_turns"] == 3


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("bogus = 1\n")
    assert main(["--config", str(cfg)] + RUN_BASE + ["--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_questions_is_usage_error(tmp_path, capsys):
    assert main(["run", "--scripted", str(FIXTURES / "golden.jsonl"), "--out", str(tmp_path)]) == 2
    assert "--questions" in capsys.readouterr().err


def test_no_backend_is_usage_error(tmp_path, monkeypatch):
    monkeypatch.delenv("AGENTFOLD_API_BASE", raising=False)
    assert main(["run", "--questions", str(FIXTURES / "questions.jsonl"), "--out", str(tmp_path)]) == 2


def test_unreachable_backend(tmp_path):
    code = main(["run", "--questions", str(FIXTURES / "questions.jsonl"), "--endpoint", "http://127.0.0.1:9/v1",
                 "--retries", "0", "--timeout", "0.5", "--out", str(tmp_path)])
    assert code == 3
    _, summary = read_trajectory(tmp_path / "trajectories" / "case-1.jsonl")
    assert summary["termination"] == "BackendFailure"


def test_unwritable_output(tmp_path):
    (tmp_path / "f").write_text("")
    assert main(RUN_BASE + ["--out", str(tmp_path / "f" / "x")]) == 4


def test_simulate_survival(capsys):
    assert main(["simulate", "survival", "--loss", "0.01", "--horizon", "100", "--trials", "100000", "--seed", "1"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert [l.split("\t")[0] for l in out] == ["stepwise", "granular"]
    fields = dict(f.split("=") for f in out[0].split("\t")[1:])
    assert abs(float(fields["survival"]) - 0.366) < 0.01


def test_simulate_survival_zero_trials(capsys):
    assert main(["simulate", "survival", "--trials", "0"]) == 2
    assert "trials" in capsys.readouterr().err


def test_simulate_episodes_then_compare(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "episodes", "--episodes", "3", "--turns", "20", "--out", str(sim), "--workers", "1"]) == 0
    assert len(list((sim / "fold").glob("*.jsonl"))) == 3
    out = tmp_path / "cmp"
    assert main(["compare", "--fold", str(sim / "fold"), "--react", str(sim / "react"), "--out", str(out)]) == 0
    assert "turn 10: fold context" in capsys.readouterr().out
    assert {p.name for p in out.iterdir()} == {"aggregates.csv", "deltas.csv", "context_tokens.svg", "block_count.svg"}


def test_analyze(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "episodes", "--policy", "stepwise", "--episodes", "2", "--turns", "8", "--compact",
                 "--out", str(sim)]) == 0
    out = tmp_path / "an"
    assert main(["analyze", "--in", str(sim / "stepwise" / "*.jsonl"), "--emit", "csv", "--out", str(out)]) == 0
    assert len((out / "aggregates.csv").read_text().splitlines()) == 1 + 8


def test_compare_mismatch(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "episodes", "--episodes", "2", "--turns", "5", "--out", str(sim)])
    other = tmp_path / "other"
    main(["simulate", "episodes", "--episodes", "1", "--turns", "5", "--policy", "react", "--out", str(other)])
    assert main(["compare", "--fold", str(sim / "fold"), "--react", str(other / "react"), "--out", str(tmp_path / "c")]) == 2


def test_analyze_missing_files(tmp_path):
    assert main(["analyze", "--in", str(tmp_path / "nothing*.jsonl")]) == 2


def test_bad_emit(tmp_path):
    assert main(["simulate", "episodes", "--episodes", "1", "--turns", "3", "--out", str(tmp_path)]) == 0
    assert main(["analyze", "--in", str(tmp_path / "fold"), "--emit", "pdf", "--out", str(tmp_path / "a")]) == 2


def test_collect(tmp_path, capsys):
    out = tmp_path / "sft.jsonl"
    assert main(["collect", "--questions", str(FIXTURES / "questions.jsonl"), "--scripted",
                 str(FIXTURES / "golden.jsonl"), "--corpus", str(FIXTURES / "corpus"), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pairs_emitted"] == 70 == len(out.read_text().splitlines())
    assert json.loads((tmp_path / "sft.report.json").read_text()) == report


def test_run_with_simenv_graph(tmp_path):
    g = generate_graph(4, 12, 200)
    g.save(tmp_path / "g.json")
    q = tmp_path / "q.jsonl"
    q.write_text(json.dumps({"id": "g", "question": g.question}) + "\n")
    code = main(["run", "--questions", str(q), "--scripted", str(FIXTURES / "golden.jsonl"), "--tools", "simenv",
                 "--graph", str(tmp_path / "g.json"), "--max-turns", "3", "--out", str(tmp_path / "o")])
    assert code == 0
    records, _ = read_trajectory(tmp_path / "o" / "trajectories" / "g.jsonl")
    assert records[0].observation.startswith("Search results for")


def test_simenv_without_graph(tmp_path):
    assert main(RUN_BASE + ["--tools", "simenv", "--out", str(tmp_path)]) == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["run", "--frobnicate"])
    assert info.value.code == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "agentfold.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("run", "simulate", "collect", "analyze", "compare"):
        assert cmd in proc.stdout


def test_shared_config_file_serves_every_command(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 5\nemit = "csv"\n[simulate]\nepisodes = 1\nturns = 3\nnodes = 8\n')
    assert main(["--config", str(cfg), "simulate", "episodes", "--out", str(tmp_path / "s")]) == 0
    assert json.loads((tmp_path / "s" / "config.resolved.json").read_text())["seed"] == 5
    assert main(["--config", str(cfg), "analyze", "--in", str(tmp_path / "s" / "fold"), "--out", str(tmp_path / "a")]) == 0
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["aggregates.csv"]
