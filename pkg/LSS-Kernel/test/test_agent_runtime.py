import pytest

from agent_runtime import (
    AgentRuntime,
    AgentTerminated,
    EndCriteria,
    Intent,
    InstanceMetrics,
    InvalidCriteria,
    MappingStrategy,
    NothingToFormulate,
    Predicate,
    PredicateKind,
    RoleBundle,
    Source,
    Status,
    UnknownAgent,
    UseForkSingle,
    class_signature,
    formulate,
    instance_metrics,
    run_lens_flow,
)
from artifact_store import Kind
from provenance import EventKind
from reasoner import LexicalReasoner, ScriptedReasoner
from utils import InputError
from view_engine import StepRecord, Trajectory, View, ViewSegment


@pytest.fixture
def runtime(store):
    return AgentRuntime(store)


def _parent(runtime, name, outputs):
    parent = runtime.create_instance(instance_id=name)
    reasoner = ScriptedReasoner.from_responses(outputs)
    for _ in outputs:
        runtime.execute_step(parent, View.empty("work"), "work", reasoner)
    return parent


def test_formulate_reads_intent_lines():
    trajectory = Trajectory(owner="a")
    with pytest.raises(NothingToFormulate):
        formulate(trajectory)
    trajectory.append(StepRecord(View.empty(), "x", "INTENT: check totals @agent-0002\nnoise\nINTENT: write report\n"))
    intents = formulate(trajectory)
    assert intents == [
        Intent("check totals", Source.AGENT, "agent-0002"),
        Intent("write report", Source.AGENT, None),
    ]
    with pytest.raises(InputError):
        Intent("   ")


def test_create_and_lookup(runtime):
    first = runtime.create_instance()
    assert first.instance_id == "agent-0001"
    assert runtime.get("agent-0001") is first
    with pytest.raises(UnknownAgent):
        runtime.get("agent-9999")
    with pytest.raises(InputError):
        runtime.create_instance(instance_id="agent-0001")
    with pytest.raises(InvalidCriteria):
        EndCriteria([])


def test_execute_step_dispatches_tools_into_feedback(runtime, store):
    skill = store.put_artifact(Kind.SKILL, "content body\n")
    agent = runtime.create_instance()
    reasoner = ScriptedReasoner.from_responses([
        f"ACTION: echo hi\nACTION: nope x\nACTION: read ghost\nACTION: read {skill.id}"
    ])
    output = runtime.execute_step(agent, View.empty("go"), "go", reasoner)
    lines = output.environment_feedback.splitlines()

    assert lines[0] == "[echo] hi"
    assert lines[1] == "[UnknownTool] nope"
    assert lines[2].startswith("[ToolError] read: ")
    assert lines[3] == "[read] content body"
    assert store.get_artifact(skill.id).use_count == 1
    assert agent.trajectory[0].feedback == output.environment_feedback


def test_end_criteria_run_hooks_once(runtime, store):
    calls = []
    runtime.register_hook("count", lambda rt, inst: calls.append(inst.instance_id))
    agent = runtime.create_instance(end_criteria=EndCriteria(
        [Predicate(PredicateKind.REQUIRED_OUTPUT_PRESENT, "DONE")],
        ["count", "distill_summary", "missing-hook"],
    ))
    reasoner = ScriptedReasoner.from_responses(["working", "DONE here"])

    runtime.execute_step(agent, View.empty("x"), "x", reasoner)
    assert agent.status == Status.ACTIVE
    runtime.execute_step(agent, View.empty("x"), "x", reasoner)
    assert agent.status == Status.TERMINATED
    done, fired = runtime.evaluate_end_criteria(agent)
    assert done and fired[0].kind == PredicateKind.REQUIRED_OUTPUT_PRESENT
    assert calls == [agent.instance_id]
    [memory] = store.list_artifacts(Kind.MEMORY)
    assert memory.content == "DONE here\n"

    with pytest.raises(AgentTerminated):
        runtime.execute_step(agent, View.empty("x"), "x", reasoner)


def test_signal_and_budget_predicates(runtime):
    signalled = runtime.create_instance(end_criteria=EndCriteria([Predicate(PredicateKind.SIGNAL_RECEIVED, "stop")]))
    assert runtime.evaluate_end_criteria(signalled) == (False, [])
    runtime.deliver_signal(signalled, "stop")
    assert runtime.evaluate_end_criteria(signalled)[0]

    spender = runtime.create_instance(end_criteria=EndCriteria([Predicate(PredicateKind.BUDGET_EXHAUSTED, 5)]))
    view = View((ViewSegment("a", "one two three", 2, 3),), "x", 3, 10)
    runtime.execute_step(spender, view, "x", LexicalReasoner())
    assert spender.active
    runtime.execute_step(spender, view, "x", LexicalReasoner())
    assert not spender.active


def test_run_cycle_projects_executes_updates_formulates(runtime, store):
    store.put_artifact(Kind.SKILL, "parse csv rows\n")
    agent = runtime.create_instance()
    reasoner = ScriptedReasoner.from_responses([
        "INTENT: collect notes",
        "WRITE: notes\nhello\nEND WRITE\nRATIONALE: save notes\nINTENT: finish up",
        "WRITE: notes\nhello again\nEND WRITE\nRATIONALE: refine notes",
    ])
    trajectory = runtime.run_cycle(agent, store, "parse csv", budget=50, reasoner=reasoner)

    assert [s.intent for s in trajectory] == ["parse csv", "collect notes", "finish up"]
    assert trajectory[0].view.source_ids == ["skill-0001"]
    notes = store.get_artifact("notes")
    assert notes.kind == Kind.DOCUMENT
    assert notes.content == "hello again\n"
    assert notes.history[-1].rationale == "refine notes"
    assert "notes" in trajectory[2].view.source_ids


def test_run_cycle_stops_at_max_steps(runtime, store):
    agent = runtime.create_instance(end_criteria=EndCriteria.max_steps(2))
    reasoner = ScriptedReasoner.from_responses(["INTENT: again"] * 5)
    runtime.run_cycle(agent, store, "loop", budget=10, reasoner=reasoner, max_steps=10)
    assert len(agent.trajectory) == 2
    assert agent.status == Status.TERMINATED

    other = runtime.create_instance()
    runtime.run_cycle(other, store, "loop", budget=10, reasoner=reasoner.fresh(), max_steps=3)
    assert len(other.trajectory) == 3
    assert other.pending_intents == []


def test_run_cycle_queues_every_formulated_intent(runtime, store):
    agent = runtime.create_instance()
    reasoner = ScriptedReasoner.from_responses([
        "INTENT: load data\nINTENT: plot data",
        "loaded",
        "plotted",
    ])
    trajectory = runtime.run_cycle(agent, store, "start", budget=10, reasoner=reasoner)

    assert [s.intent for s in trajectory] == ["start", "load data", "plot data"]
    assert agent.pending_intents == []


def test_termination_hooks_see_the_steps_writes(runtime, store):
    seen = []
    runtime.register_hook("peek", lambda rt, inst: seen.append(rt.store.get_artifact("notes").content))
    agent = runtime.create_instance(end_criteria=EndCriteria(
        [Predicate(PredicateKind.REQUIRED_OUTPUT_PRESENT, "DONE")], ["peek"],
    ))
    reasoner = ScriptedReasoner.from_responses(["WRITE: notes\nfinal body\nEND WRITE\nDONE"])
    runtime.run_cycle(agent, store, "wrap up", budget=10, reasoner=reasoner)

    assert agent.status == Status.TERMINATED
    assert seen == ["final body\n"]


def test_unconfident_step_expands_the_next_view(runtime, store):
    first = store.put_artifact(Kind.SKILL, "alpha beta\n")
    second = store.put_artifact(Kind.SKILL, "alpha gamma delta\n")
    agent = runtime.create_instance()
    reasoner = ScriptedReasoner.from_responses(["UNCONFIDENT", "ok"])
    trajectory = runtime.run_cycle(agent, store, "alpha", budget=3, reasoner=reasoner, expansion_budget=10)

    assert trajectory[0].view.source_ids == [first.id]
    assert trajectory[1].view.source_ids == [first.id, second.id]
    assert trajectory[1].intent == trajectory[0].intent


def test_class_signature_depends_on_views_only(runtime):
    view = View((ViewSegment("a", "body", 2, 1),), "x", 1, 5)
    one = runtime.create_instance()
    two = runtime.create_instance()
    runtime.execute_step(one, view, "x", ScriptedReasoner.from_responses(["out one"]))
    runtime.execute_step(two, view, "y", ScriptedReasoner.from_responses(["out two"]))
    assert class_signature(one) == class_signature(two)

    three = runtime.create_instance()
    other = View((ViewSegment("a", "bodY", 2, 1),), "x", 1, 5)
    runtime.execute_step(three, other, "x", ScriptedReasoner.from_responses(["out one"]))
    assert class_signature(one) != class_signature(three)


def test_instance_metrics(runtime):
    agent = runtime.create_instance()
    assert instance_metrics(agent, 100).context_utilization == 0.0
    view = View((ViewSegment("a", "one two", 2, 40),), "x", 40, 50)
    runtime.execute_step(agent, view, "x", LexicalReasoner())
    assert instance_metrics(agent, 100).context_utilization == 0.4
    assert instance_metrics(agent, 10, ambiguity_flag=True) == InstanceMetrics(1.0, True)


def test_fork_single_curates_and_records(runtime, store):
    parent = _parent(runtime, "parent", ["load csv", "plot chart", "csv stats"])
    child = runtime.fork_single(parent, "csv", budget=4)

    assert [s.output for s in child.trajectory] == ["load csv", "csv stats"]
    assert child.parent_ids == ["parent"]
    fork = store.get_artifact(child.fork_artifact_id)
    assert fork.kind == Kind.FORK
    assert fork.content == "parent: parent\nfragment: parent steps 0..0\nfragment: parent steps 2..2\n"
    event = runtime.log.get(child.inherit_event_id)
    assert event.kind == EventKind.INHERIT
    assert (event.subject, event.object) == (child.instance_id, "parent")
    assert len(parent.trajectory) == 3


def test_fork_single_with_seed_artifact(runtime, store):
    parent = _parent(runtime, "parent", ["load csv", "plot chart"])
    seed = store.put_artifact(Kind.CONTRACT, "## roles\nparent: lead\n")
    root = store.log.append(EventKind.CONTRACT, "mediator", seed.id, "test")
    child = runtime.fork_single(parent, "csv", budget=10, seed_artifact=seed, parent_event=root.event_id)

    assert child.trajectory[0].output == seed.content
    assert child.trajectory[0].view.source_ids == [seed.id]
    assert [s.output for s in child.trajectory][1:] == ["load csv", "plot chart"]
    assert runtime.log.get(child.inherit_event_id).parent_event == root.event_id


def test_fork_multi_composes_in_parent_order(runtime, store):
    left = _parent(runtime, "left", ["csv from left"])
    right = _parent(runtime, "right", ["csv from right"])
    child = runtime.fork_multi([left, right], "csv", budget=10)

    assert [s.output for s in child.trajectory] == ["csv from left", "csv from right"]
    assert child.parent_ids == ["left", "right"]
    assert "fragment: right steps 0..0" in store.get_artifact(child.fork_artifact_id).content
    with pytest.raises(UseForkSingle):
        runtime.fork_multi([left], "csv", budget=10)


def test_shift_pattern_thresholds(runtime):
    assert runtime.shift_pattern(InstanceMetrics(0.9)) == MappingStrategy.DERIVED_EXECUTION
    assert runtime.shift_pattern(InstanceMetrics(0.5, True)) == MappingStrategy.COLLABORATION
    assert runtime.shift_pattern(InstanceMetrics(0.8)) == MappingStrategy.EMBEDDED_MECHANISM
    assert [e.object for e in runtime.log] == ["DerivedExecution", "Collaboration", "EmbeddedMechanism"]
    with pytest.raises(InputError):
        runtime.shift_pattern(InstanceMetrics(1.5))


def test_role_bundle_parsing(tmp_path):
    bundle = RoleBundle.from_text("# roles\nworker: w1 | DedicatedAgent\nlens: l1 | SelfDerivedLoop\n")
    assert bundle.agent_for("worker") == "w1"
    assert RoleBundle.from_text(bundle.to_text()) == bundle
    with pytest.raises(InputError):
        bundle.agent_for("router")
    with pytest.raises(InputError):
        RoleBundle.from_text("worker: w1 | Telepathy\n")
    with pytest.raises(InputError):
        RoleBundle.from_text("worker w1\n")
    with pytest.raises(InputError):
        RoleBundle.load(tmp_path / "missing.txt")
    assert RoleBundle.load(None).agent_for("generator") == "agent-generator"


def test_lens_flow_hands_ids_to_the_worker(runtime, store):
    store.put_artifact(Kind.SKILL, "parse csv rows\n")
    store.put_artifact(Kind.SKILL, "draw chart\n")
    store.put_artifact(Kind.SKILL, "csv headers\n")
    worker = runtime.create_instance(instance_id="worker")

    result = run_lens_flow(runtime, worker, "parse csv", k=2, reasoner=LexicalReasoner(), budget=100)

    assert result.selected_ids == ["skill-0001", "skill-0003"]
    assert result.view.source_ids == result.selected_ids
    lens = runtime.get(result.lens_instance_id)
    assert lens.status == Status.TERMINATED
    events = [e for e in runtime.log if e.kind == EventKind.LENS_SELECT]
    assert [e.object for e in events] == result.selected_ids
    assert all(e.parent_event == lens.inherit_event_id for e in events)
