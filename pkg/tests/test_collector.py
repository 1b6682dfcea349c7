from __future__ import annotations

import json

import pytest

from agentfold.backends import BackendFailure, ScriptedBackend
from agentfold.collector import (
    CollectionConfig,
    OutputUnwritable,
    SftPair,
    TeacherUnavailable,
    collect,
    load_questions,
    read_context,
    read_pairs,
    validate_pair,
)
from agentfold.protocol import render_context, serialize_response
from agentfold.simenv import OraclePolicy, generate_graph, simenv_registry
from agentfold.toolbox import SEARCH, ToolRegistry
from agentfold.workspace import Question

from conftest import answer_response, make_registry, make_ws, tool_response

THREE_STEPS = [tool_response(), tool_response((1, 1)), answer_response((2, 2))]


def config(tmp_path, questions, scripts, tools=None, **kw):
    return CollectionConfig(
        questions=questions,
        teacher=lambda q: ScriptedBackend(scripts[q.qid]),
        tools=tools or (lambda q: make_registry()),
        output_path=tmp_path / "pairs.jsonl",
        **kw,
    )


def test_all_valid_two_by_three(tmp_path):
    qs = [Question("a", "q1"), Question("b", "q2")]
    report = collect(config(tmp_path, qs, {"q1": THREE_STEPS, "q2": THREE_STEPS}))
    pairs = read_pairs(tmp_path / "pairs.jsonl")
    assert report.pairs_emitted == len(pairs) == 6
    assert report.rejections_by_reason == {} and report.balanced
    assert [(p.question_id, p.step) for p in pairs] == [("q1", 1), ("q1", 2), ("q1", 3), ("q2", 1), ("q2", 2), ("q2", 3)]
    assert all(validate_pair(p) is None for p in pairs)


def test_malformed_fold_every_attempt_abandons(tmp_path):
    bad = serialize_response(tool_response((1, 1))).replace('"summary"', '"sumary"')
    scripts = {"q1": [tool_response(), [bad], answer_response((2, 2))], "q2": THREE_STEPS}
    report = collect(config(tmp_path, [Question("a", "q1"), Question("b", "q2")], scripts))
    assert report.trajectories_abandoned == 1
    assert report.terminal_reasons == {"MalformedFoldJson": 1}
    assert report.rejections_by_reason == {"MalformedFoldJson": 4}
    assert report.pairs_emitted == 3 and report.steps_attempted == 5
    assert report.steps_rejected_terminal == 1 and report.steps_in_discarded_trajectories == 1
    assert report.balanced


def test_resample_recovers(tmp_path):
    good = tool_response((1, 1))
    scripts = {"q1": [tool_response(), ["junk", "more junk", good], answer_response((2, 2))]}
    report = collect(config(tmp_path, [Question("a", "q1")], scripts))
    assert report.pairs_emitted == 3 and report.rejections_by_reason == {"MissingBlock": 2}
    assert report.trajectories_kept == 1


def test_env_errors_discard_whole_trajectory(tmp_path):
    def broken(args):
        raise OSError("reset")

    fn = lambda step, seed: tool_response((step - 1, step - 1) if step > 1 else None)
    cfg = CollectionConfig(
        questions=[Question("a", "q1")],
        teacher=lambda q: ScriptedBackend(fn=fn),
        tools=lambda q: ToolRegistry({"search": (SEARCH, broken)}),
        output_path=tmp_path / "pairs.jsonl",
        max_env_errors=3,
    )
    report = collect(cfg)
    assert report.trajectories_discarded == 1 and report.pairs_emitted == 0
    assert report.steps_attempted == 4 and report.steps_in_discarded_trajectories == 4
    assert report.balanced
    assert (tmp_path / "pairs.jsonl").read_text() == ""


def test_unknown_tool_is_rejected(tmp_path):
    scripts = {"q1": [[tool_response(name="teleport"), tool_response()], answer_response((1, 1))]}
    report = collect(config(tmp_path, [Question("a", "q1")], scripts))
    assert report.rejections_by_reason == {"ToolNotFound": 1} and report.pairs_emitted == 2


def test_custom_gate(tmp_path):
    gate = lambda ws, r: "TooShort" if len(r.explanation) < 50 else None
    report = collect(config(tmp_path, [Question("a", "q1")], {"q1": THREE_STEPS}, gates=[gate], max_step_retries=0))
    assert report.terminal_reasons == {"TooShort": 1} and report.balanced


def test_teacher_failure(tmp_path):
    class Down:
        def complete(self, prompt, params):
            raise BackendFailure("down", None, 2)

    cfg = CollectionConfig([Question("a", "q1")], lambda q: Down(), lambda q: make_registry(), tmp_path / "p.jsonl")
    with pytest.raises(TeacherUnavailable):
        collect(cfg)


def test_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("")
    cfg = CollectionConfig([Question("a", "q1")], lambda q: ScriptedBackend(THREE_STEPS), lambda q: make_registry(),
                           tmp_path / "file" / "pairs.jsonl")
    with pytest.raises(OutputUnwritable):
        collect(cfg)


def test_config_requires_questions(tmp_path):
    with pytest.raises(ValueError):
        CollectionConfig([], lambda q: None, lambda q: None, tmp_path / "x")


# ---------------------------------------------------------------- re-validation

def test_read_context_recovers_structure():
    ws = make_ws(7, [(1, 1), (2, 4), (5, 5)], latest=6)
    for offset in (0, 1):
        blocks, latest, names = read_context(render_context(ws, offset).text, offset)
        assert blocks == [(1, 1), (2, 4), (5, 5)] and latest == 6
        assert names == ["search", "visit", "calculator"]


def _pair(ws, response, step):
    return SftPair(render_context(ws).text, serialize_response(response), "q", step)


def test_validate_clean_pair():
    assert validate_pair(_pair(make_ws(3, [(1, 1)], latest=2), tool_response((2, 2)), 3)) is None


def test_validate_range_end_mismatch():
    ws = make_ws(3, [(1, 1)], latest=2)
    p = SftPair(render_context(ws).text, serialize_response(tool_response((1, 1))), "q", 2)
    # context is C_3 but the pair claims step 2: the structure check fires first
    assert validate_pair(p).kind == "StepMismatch"
    p = SftPair(render_context(ws).text, serialize_response(tool_response((2, 2))), "q", 3)
    bad = SftPair(p.context, p.response.replace("[2, 2]", "[2, 3]"), "q", 3)
    assert validate_pair(bad).kind == "RangeEndMismatch"


def test_validate_misaligned_and_unknown_tool():
    ws = make_ws(5, [(1, 1), (2, 3)], latest=4)
    assert validate_pair(_pair(ws, tool_response((3, 4)), 5)).kind == "RangeMisaligned"
    assert validate_pair(_pair(ws, tool_response((4, 4), name="teleport"), 5)).kind == "ToolNotFound"


def test_validate_garbage_context():
    assert validate_pair(SftPair("hello", "x", "q", 1)).kind == "ContextUnreadable"


def simenv_collection(tmp_path, n=50, faults=True):
    graphs = {f"g{i:02d}": generate_graph(1000 + i, 12 + i % 9, 300) for i in range(n)}
    questions = [Question(g.question, qid) for qid, g in graphs.items()]

    def teacher(q):
        script = list(OraclePolicy(graphs[q.qid]).script)
        i = int(q.qid[1:])
        if faults and i % 7 == 3:
            script[2] = ["<think>x</think>", script[2]]  # one resample, then fine
        if faults and i % 11 == 5:
            script[3] = ["no blocks at all"] * 5  # abandoned
        return ScriptedBackend(script)

    cfg = CollectionConfig(questions, teacher, lambda q: simenv_registry(graphs[q.qid]), tmp_path / "sft.jsonl", workers=4)
    return collect(cfg)


def test_fifty_episode_collection_passes_revalidation(tmp_path):
    report = simenv_collection(tmp_path)
    pairs = read_pairs(tmp_path / "sft.jsonl")
    assert len(pairs) == report.pairs_emitted > 0
    assert sum(validate_pair(p) is None for p in pairs) / len(pairs) == 1.0
    assert report.trajectories_abandoned == 5 and report.balanced
    assert report.rejections_by_reason["MissingBlock"] == 5 * 4 + 7


def test_collection_is_deterministic(tmp_path):
    simenv_collection(tmp_path / "a", n=10)
    simenv_collection(tmp_path / "b", n=10)
    assert (tmp_path / "a" / "sft.jsonl").read_bytes() == (tmp_path / "b" / "sft.jsonl").read_bytes()


def test_load_questions(tmp_path):
    path = tmp_path / "q.jsonl"
    path.write_text(json.dumps({"id": "a", "question": "Why?"}) + "\n\n" + json.dumps({"question": "How?"}) + "\n")
    assert load_questions(path) == [Question("Why?", "a"), Question("How?", "3")]
    path.write_text(json.dumps({"id": "a"}) + "\n")
    with pytest.raises(ValueError):
        load_questions(path)
