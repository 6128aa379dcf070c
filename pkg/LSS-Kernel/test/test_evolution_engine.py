import csv

import pytest

from artifact_store import Kind
from evolution_engine import (
    EmptySuite,
    EvolvePolicy,
    Evolver,
    HypothesisRequired,
    NoMutations,
    PatchNotOpen,
    PatchStatus,
    ReplayTask,
    TaskSuite,
    Verdict,
    write_fitness_tsv,
)
from reasoner import ScriptedReasoner, Transcript
from utils import InputError, store_digest
from view_engine import View

ANSWER_SUITE = TaskSuite("answers", [ReplayTask("t1", "what is the answer", expect=("42",))])
ALWAYS_SUITE = TaskSuite("always", [ReplayTask("t1", "say ok", responses=("ok",), expect=("ok",))])


def _baseline(evolver):
    baseline = evolver.runtime.create_instance(instance_id="baseline")
    evolver.runtime.execute_step(baseline, View.empty("notes"), "notes", ScriptedReasoner.from_responses(["baseline notes"]))
    return baseline


def _transcript():
    return Transcript(
        responses=["working\nINTENT: continue", "result: fine"],
        alternates={1: ["result: 42"]},
        fragments=["hint: use 42"],
    )


def test_suite_and_policy_parsing(store):
    suite = TaskSuite.from_json({"id": "s1", "tasks": [{"intent": "x", "expect": ["y"], "max_steps": 2}]})
    assert suite.suite_id == "s1"
    assert suite.tasks[0] == ReplayTask("task-0", "x", expect=("y",), max_steps=2)
    with pytest.raises(InputError):
        TaskSuite.from_json({"tasks": [{"expect": []}]})

    assert EvolvePolicy.from_store(store) == EvolvePolicy.defaults(store.settings)
    store.put_artifact(Kind.EVOLVE, "cap: 2\npass_threshold: 0.5\nmutation_ops: drop-step\n")
    policy = EvolvePolicy.from_store(store)
    assert (policy.cap, policy.pass_threshold, policy.mutation_ops) == (2, 0.5, ("drop-step",))
    with pytest.raises(InputError):
        EvolvePolicy.from_markdown("cap: 0\n", store.settings)
    with pytest.raises(InputError):
        EvolvePolicy.from_markdown("mutation_ops: teleport\n", store.settings)


def test_propose_patch_needs_hypothesis(store):
    target = store.put_artifact(Kind.PROMPT, "the answer is unknown\n")
    evolver = Evolver(store)
    patch = evolver.propose_patch(target.id, "the answer is 42\n", "state the answer")
    assert patch.patch_id == "patch-0001"
    assert patch.rollback_chain == [1]
    with pytest.raises(HypothesisRequired):
        evolver.propose_patch(target.id, "x", " ")


def test_sandbox_evaluation_leaves_store_untouched(disk_store, settings):
    target = disk_store.put_artifact(Kind.PROMPT, "the answer is unknown\n")
    evolver = Evolver(disk_store)
    before = store_digest(settings.home)

    patch = evolver.propose_patch(target.id, "the answer is 42\n", "state the answer")
    sandbox = evolver.open_sandbox()
    report = evolver.evaluate_in_sandbox(sandbox, patch, ANSWER_SUITE, ab=True)

    assert store_digest(settings.home) == before
    assert report.score == 1.0
    assert report.verdict == Verdict.PASS
    assert report.control.score == 0.0
    assert patch.status == PatchStatus.SANDBOXED
    assert sandbox.overlay[target.id].content == "the answer is 42\n"

    [merged] = evolver.select_merge([patch])
    assert merged is patch
    assert patch.status == PatchStatus.MERGED
    assert patch.rollback_chain == [1, 1]
    current = disk_store.get_artifact(target.id)
    assert current.content == "the answer is 42\n"
    assert "patch-0001" in current.history[-1].rationale
    assert store_digest(settings.home) != before

    with pytest.raises(PatchNotOpen):
        evolver.evaluate_in_sandbox(evolver.open_sandbox(), patch, ANSWER_SUITE)
    assert disk_store.rollback_artifact(target.id, 1).content == "the answer is unknown\n"


def test_failing_patch_is_rejected(store):
    target = store.put_artifact(Kind.PROMPT, "the answer is unknown\n")
    evolver = Evolver(store)
    patch = evolver.propose_patch(target.id, "no idea at all\n", "be vague")
    evolver.evaluate_in_sandbox(evolver.open_sandbox(), patch, ANSWER_SUITE)
    assert evolver.select_merge([patch]) == []
    assert patch.status == PatchStatus.REJECTED
    assert store.get_artifact(target.id).version == 1


def test_merge_cap_defers_extra_passing_patches(store):
    targets = [store.put_artifact(Kind.SKILL, f"skill {i}\n") for i in range(3)]
    evolver = Evolver(store)
    patches = [evolver.propose_patch(t.id, f"better {t.id}\n", "improve") for t in targets]
    for patch in patches:
        evolver.evaluate_in_sandbox(evolver.open_sandbox(), patch, ALWAYS_SUITE)

    merged = evolver.select_merge(patches, cap=2)
    assert [p.patch_id for p in merged] == ["patch-0001", "patch-0002"]
    assert patches[2].status == PatchStatus.SANDBOXED
    assert store.get_artifact(targets[2].id).version == 1


def test_nested_sandboxes_are_isolated(store):
    target = store.put_artifact(Kind.PLAN, "base\n")
    evolver = Evolver(store)
    outer = evolver.open_sandbox()
    inner = evolver.open_sandbox(outer)
    inner.store.revise_artifact(target.id, "inner\n", rationale="try")

    assert inner.depth == 2
    assert outer.store.get_artifact(target.id).content == "base\n"
    assert store.get_artifact(target.id).content == "base\n"
    assert outer.overlay == {}


def test_replay_and_empty_suite(store):
    store.put_artifact(Kind.PROMPT, "the answer is 42\n")
    evolver = Evolver(store)
    report = evolver.replay(ANSWER_SUITE)
    assert (report.passed, report.total) == (1, 1)
    with pytest.raises(EmptySuite):
        evolver.replay(TaskSuite("empty", []))


def test_genetic_round_keeps_best_candidate(store):
    evolver = Evolver(store)
    baseline = _baseline(evolver)
    suite = TaskSuite("gen", [ReplayTask("t1", "compute result", expect=("42",))])

    result = evolver.genetic_round(baseline, 3, ["drop-step", "swap-tool-return", "inject-fragment"], suite, 1, _transcript(), seed=0)

    assert [r.score for r in result.reports] == [0.0, 1.0, 1.0]
    assert [s.instance_id for s in result.survivors] == ["baseline/g1-cand-1"]
    assert result.transcripts["baseline/g1-cand-1"].responses[1] == "result: 42"
    [trace_id] = result.trace_ids
    trace = store.get_artifact(trace_id)
    assert trace.kind == Kind.TRACE
    assert "lesson: result: 42\n" in trace.content
    assert "lesson: baseline notes" not in trace.content


def test_genetic_round_scores_mutations_over_scripted_tasks(store):
    evolver = Evolver(store)
    baseline = _baseline(evolver)
    suite = TaskSuite("gen", [ReplayTask("t1", "compute result", responses=("result: fine",), expect=("42",))])

    result = evolver.genetic_round(baseline, 3, ["drop-step", "swap-tool-return", "inject-fragment"], suite, 1, _transcript(), seed=0)

    assert [r.score for r in result.reports] == [0.0, 1.0, 1.0]
    assert evolver.replay(suite).score == 0.0


def test_second_evolver_starts_a_new_generation(store):
    first = Evolver(store)
    baseline = _baseline(first)
    suite = TaskSuite("gen", [ReplayTask("t1", "compute result", expect=("42",))])
    first.genetic_round(baseline, 2, ["swap-tool-return"], suite, 1, _transcript(), seed=0)

    second = Evolver(store, runtime=first.runtime)
    result = second.genetic_round(baseline, 2, ["swap-tool-return"], suite, 1, _transcript(), seed=0)
    assert [s.instance_id for s in result.survivors] == ["baseline/g2-cand-0"]


def test_genetic_round_validation(store):
    evolver = Evolver(store)
    baseline = _baseline(evolver)
    suite = TaskSuite("gen", [ReplayTask("t1", "compute result", expect=("42",))])
    with pytest.raises(NoMutations):
        evolver.genetic_round(baseline, 2, [], suite, 1, _transcript())
    with pytest.raises(InputError):
        evolver.genetic_round(baseline, 1, ["drop-step"], suite, 2, _transcript())
    with pytest.raises(InputError):
        evolver.genetic_round(baseline, 1, ["shuffle"], suite, 1, _transcript())


def test_write_fitness_tsv(store, tmp_path):
    target = store.put_artifact(Kind.PROMPT, "the answer is unknown\n")
    evolver = Evolver(store)
    patch = evolver.propose_patch(target.id, "the answer is 42\n", "state it")
    report = evolver.evaluate_in_sandbox(evolver.open_sandbox(), patch, ANSWER_SUITE, ab=True)

    path = write_fitness_tsv([report.control, report], tmp_path / "fitness.tsv")
    with path.open(encoding="utf-8") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    assert rows[0] == ["candidate_id", "task_suite_id", "score", "token_cost", "verdict", "control_score"]
    assert rows[1][:3] == ["patch-0001/control", "answers", "0.0000"]
    assert rows[2][4:] == ["pass", "0.0000"]
