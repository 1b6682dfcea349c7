from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentfold.engine import FOLD, REACT
from agentfold.simenv import (
    GRANULAR,
    STEPWISE,
    FactGraph,
    OraclePolicy,
    SurvivalParams,
    derive_seed,
    fact_survives,
    generate_graph,
    run_policy_episode,
    simulate_corpus,
    survival_expected,
    survival_monte_carlo,
    traversal,
)
from agentfold.tokens import ApproxCounter
from agentfold.trajectory import Termination, read_trajectory


def test_graph_is_deterministic():
    assert generate_graph(7, 50, 800) == generate_graph(7, 50, 800)
    assert generate_graph(7, 50, 800) != generate_graph(8, 50, 800)


@given(st.integers(0, 2**32), st.integers(2, 120))
@settings(max_examples=60, deadline=None)
def test_goal_reachable_from_entry(seed, n):
    g = generate_graph(seed, n, 200)
    assert g.goal in g.reachable(g.entries[0])
    assert len(g.nodes) == n and g.goal == g.main[-1]


def test_mean_observation_length_near_noise_chars():
    g = generate_graph(7, 200, 800)
    mean = sum(len(t) for t in g.nodes.values()) / len(g.nodes)
    assert abs(mean - 800) <= 80


def test_graph_json_round_trip(tmp_path):
    g = generate_graph(3, 40, 300)
    g.save(tmp_path / "g.json")
    assert FactGraph.load(tmp_path / "g.json") == g


def test_derive_seed_is_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed(0, "x") < 2**64


def test_small_graph_answered_quickly():
    g = generate_graph(11, 10, 400)
    res = run_policy_episode(g, FOLD, 100)
    assert res.termination is Termination.ANSWERED and res.answer == g.answer
    assert len(res.records) < 15
    assert len(res.records) == len(traversal(g)) + 1


def test_react_tokens_strictly_increase():
    g = generate_graph(11, 10, 400)
    res = run_policy_episode(g, REACT, 100)
    tokens = [r.token_count for r in res.records]
    assert res.termination is Termination.ANSWERED
    assert all(a < b for a, b in zip(tokens, tokens[1:]))


@pytest.fixture(scope="module")
def long_episodes():
    g = generate_graph(5, 130, 800)
    return g, {p: run_policy_episode(g, p, 101) for p in (FOLD, REACT, STEPWISE)}


def test_fold_block_count_stays_below_turn(long_episodes):
    _, runs = long_episodes
    rec = runs[FOLD].records[100]
    assert rec.step == 101 and rec.block_count < 100
    assert runs[REACT].records[100].block_count == 100


def test_no_fallbacks_in_oracle_runs(long_episodes):
    _, runs = long_episodes
    for res in runs.values():
        assert not any(r.implicit_fold or r.parse_error or r.env_error for r in res.records)


def test_fold_context_far_below_react(long_episodes):
    _, runs = long_episodes
    # section headers cost a little at step 2; from then on folding wins
    pairs = list(zip(runs[FOLD].records, runs[REACT].records))
    assert all(f.token_count < r.token_count for f, r in pairs[2:])
    assert pairs[100][0].token_count < 0.1 * pairs[100][1].token_count


def test_token_bounds(long_episodes):
    _, runs = long_episodes
    c = ApproxCounter()
    base = runs[FOLD].records[0].token_count
    for rec in runs[FOLD].records[1:]:
        # overhead + latest observation + a bounded summary line per block
        assert rec.token_count <= base + c.count(rec.observation) + 80 * rec.block_count + 200
    obs_total = 0
    for rec in runs[REACT].records:
        assert rec.token_count >= obs_total
        obs_total += c.count(rec.observation)


def test_key_findings_survive_folding(long_episodes):
    g, runs = long_episodes
    last = runs[FOLD].records[-1].prompt
    clues = [v.split()[-1] for n, v in g.keys.items() if n != g.goal and n in [s.node for s in traversal(g)[:100]]]
    assert clues and all(fact_survives(last, c) for c in clues)


def test_stepwise_keeps_one_summary_block(long_episodes):
    _, runs = long_episodes
    assert {r.block_count for r in runs[STEPWISE].records[2:]} == {2}


def test_unknown_policy():
    with pytest.raises(ValueError):
        OraclePolicy(generate_graph(1, 10), "other")


def test_corpus_reproducible_and_worker_independent(tmp_path):
    a = simulate_corpus(3, 3, 30, out_dir=tmp_path / "a")
    simulate_corpus(3, 3, 30, out_dir=tmp_path / "b", workers=2)
    for p in (FOLD, REACT):
        for i in range(3):
            name = f"{p}/ep{i:04d}.jsonl"
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a[FOLD][0].question_id == a[REACT][0].question_id == "sim-0000"
    records, summary = read_trajectory(tmp_path / "a" / "fold" / "ep0000.jsonl")
    assert summary["termination"] == "TurnLimit" and len(records) == 30


# ---------------------------------------------------------------- survival

def test_survival_zero_loss_is_exact():
    for policy in (STEPWISE, GRANULAR):
        assert survival_monte_carlo(SurvivalParams(0.0, 100, 1000), policy) == 1.0


def test_survival_certain_loss():
    assert survival_monte_carlo(SurvivalParams(1.0, 3, 1000), GRANULAR) == 0.0


def test_survival_expected_values():
    assert survival_expected(0.01, 100) == pytest.approx(0.36603, abs=1e-5)
    assert survival_expected(0.01, 500) == pytest.approx(0.006570, abs=1e-6)
    assert survival_expected(0.01, 100, GRANULAR) == 0.99


@pytest.mark.parametrize("policy,p,h", [(STEPWISE, 0.01, 100), (STEPWISE, 0.05, 20), (GRANULAR, 0.01, 100), (GRANULAR, 0.3, 7)])
def test_survival_within_three_sigma(policy, p, h):
    n = 200_000
    est = survival_monte_carlo(SurvivalParams(p, h, n, seed=42), policy)
    q = survival_expected(p, h, policy)
    assert abs(est - q) <= 3 * math.sqrt(q * (1 - q) / n)


def test_survival_seeded_and_chunk_schedule_fixed():
    params = SurvivalParams(0.01, 100, 50_000, seed=9)
    assert survival_monte_carlo(params) == survival_monte_carlo(params)
    assert survival_monte_carlo(params) != survival_monte_carlo(SurvivalParams(0.01, 100, 50_000, seed=10))


@pytest.mark.parametrize("kwargs", [dict(loss_prob=1.5), dict(horizon=0), dict(trials=0)])
def test_survival_params_validation(kwargs):
    base = dict(loss_prob=0.01, horizon=10, trials=10)
    base.update(kwargs)
    with pytest.raises(ValueError):
        SurvivalParams(**base)


def test_segments_consolidate_into_chapters(long_episodes):
    g, runs = long_episodes
    last = runs[FOLD].records[-1]
    assert "key findings: clue " in last.prompt
    widths = [b - a for a, b in last.structure["blocks"]]
    assert max(widths) >= 30


def test_chapters_can_be_disabled():
    g = generate_graph(5, 130, 100)
    plain = OraclePolicy(g, FOLD, chapter_every=0).script
    assert not any(r.fold and "key findings:" in r.fold.summary for r in plain)
