import json

import pytest

from artifact_store import Kind, NotFound, Tier
from binding_engine import (
    AgentProfile,
    Candidate,
    Contract,
    EmptyRoster,
    FacadePolicy,
    InvalidK,
    InvalidParties,
    InvalidTeam,
    Message,
    NegotiationFailed,
    NoRoute,
    Role,
    ScopeViolation,
    ScriptedNegotiator,
    TeamSpec,
    check_scope,
    describe_candidates,
    facade_filter,
    generate_index,
    generate_team,
    index_entries,
    lens_select,
    mediate,
    route,
    scope_filter,
    trace_chain,
    verify_lens_decision,
    verify_route_decision,
    write_binding_config,
)
from provenance import EventKind, Outcome, ProvenanceLog


class RecordingForker:
    def __init__(self):
        self.calls = []

    def fork_single(self, parent, intent, budget, seed_artifact=None, parent_event=None):
        self.calls.append((parent, seed_artifact.id, parent_event))
        return f"{parent}-child"


def _team():
    return TeamSpec(
        roles=[
            Role("agent-b", "parser", capability_keywords=frozenset({"csv", "parse"})),
            Role("agent-a", "plotter", capability_keywords=frozenset({"plot", "chart"})),
            Role("agent-c", "backup", capability_keywords=frozenset({"csv", "parse"})),
        ],
        edges=[("agent-a", "agent-b", "hand off")],
    )


# ---- lens --------------------------------------------------------------

def test_lens_select_top_k_with_index_tie_break():
    candidates = [
        Candidate("c1", "nothing here"),
        Candidate("c2", "csv parser"),
        Candidate("c3", "csv reader"),
        Candidate("c4", "csv parser utilities"),
    ]
    decision = lens_select(candidates, "csv parser", k=2)
    assert decision.ids == ["c2", "c4"]
    assert decision.scores == [0, 2, 1, 2]

    assert lens_select(candidates, "csv parser", k=10).ids == ["c2", "c4", "c3", "c1"]
    assert lens_select([], "csv", k=3).ids == []
    with pytest.raises(InvalidK):
        lens_select(candidates, "csv", k=0)


def test_lens_only_sees_briefs():
    seen = []

    def scorer(query, text):
        seen.append(text)
        return len(text)

    lens_select([Candidate("a", "x" * 1000), Candidate("b", "short")], "q", k=1, brief_limit=280, scorer=scorer)
    assert max(len(t) for t in seen) == 280


def test_lens_decision_is_logged_and_replayable():
    log = ProvenanceLog()
    candidates = [Candidate(f"c{i}", f"token{i} shared") for i in range(6)]
    decision = lens_select(candidates, "token4 token2 shared", k=3, log=log, subject="lens-1")

    assert [e.object for e in decision.events] == decision.ids == ["c2", "c4", "c0"]
    assert all(e.kind == EventKind.LENS_SELECT for e in decision.events)
    assert json.loads(decision.events[0].evidence)["rank"] == 0
    assert verify_lens_decision(decision.events)
    assert verify_lens_decision(decision.events, candidates)
    shuffled = list(reversed(candidates))
    assert not verify_lens_decision(decision.events, shuffled, scorer=lambda q, t: 0)


# ---- index ------------------------------------------------------------

def test_index_entries_link_by_shared_tokens(store):
    store.put_artifact(Kind.SKILL, "parse csv rows\n")
    store.put_artifact(Kind.SKILL, "csv rows to json\n")
    store.put_artifact(Kind.SKILL, "draw a chart\n")
    store.put_artifact(Kind.INDEX, "old index\n")

    entries = generate_index(store.list_artifacts(), max_degree=3, store=store)
    lines = [e.to_line() for e in entries]
    assert lines == [
        "skill-0001 -> skill-0002 | 2 | csv rows",
        "skill-0002 -> skill-0001 | 2 | csv rows",
    ]
    [index] = [a for a in store.list_artifacts(Kind.INDEX) if a.id != "index-0004"]
    assert index.content == "".join(line + "\n" for line in lines)

    focal = generate_index(store.list_artifacts(), focal_id="skill-0003")
    assert focal == []
    with pytest.raises(NotFound):
        generate_index(store.list_artifacts(), focal_id="missing")


def test_describe_candidates_lists_rare_tokens_first():
    candidates = [
        Candidate("a", "common zeta"),
        Candidate("b", "common beta"),
        Candidate("c", "common gamma beta"),
    ]
    entries = index_entries([(c.id, c.text) for c in candidates], max_degree=2)
    lines = describe_candidates(candidates, entries, line_limit=280, n_tokens=2)
    assert lines["a"] == "a: zeta common | near b c"
    assert lines["c"].startswith("c: gamma beta | near b")
    assert all(len(l) <= 12 for l in describe_candidates(candidates, entries, line_limit=12).values())


# ---- routing and teams ------------------------------------------------

def test_route_prefers_overlap_then_smallest_id():
    log = ProvenanceLog()
    team = _team()
    decision = route(Message("request", "please parse this CSV"), team, log=log)
    assert decision.agent_id == "agent-b"
    assert decision.event.kind == EventKind.ROUTE
    assert verify_route_decision(decision.event)

    fallback = route(Message("request", "unrelated words"), team)
    assert fallback.agent_id == "agent-a"
    with pytest.raises(NoRoute):
        route(Message("request", "x"), None)


def test_team_spec_validation_and_markdown():
    team = _team()
    assert team.edge_count == 1
    again = TeamSpec.from_markdown(team.to_markdown())
    assert again.edges == team.edges
    assert again.role("agent-b").capability_keywords == frozenset({"csv", "parse"})
    with pytest.raises(InvalidTeam):
        TeamSpec(roles=[Role("a", "x")], edges=[("a", "ghost", "p")])
    with pytest.raises(InvalidTeam):
        TeamSpec(roles=[])


def test_generate_team_builds_star_and_persists(store):
    agents = [
        AgentProfile("agent-3", frozenset({"chart"})),
        AgentProfile("agent-1", frozenset({"csv", "parse"})),
        AgentProfile("agent-2", frozenset({"csv"})),
    ]
    team = generate_team("parse the csv", agents, max_size=2, store=store, log=store.log)
    assert [r.agent_id for r in team.roles] == ["agent-1", "agent-2"]
    assert team.edges == [("agent-1", "agent-2", "delegate")]
    assert team.roles[0].role_name == "coordinator"
    assert store.get_artifact(team.artifact_id).kind == Kind.TEAM
    assert len(store.log) == 2

    with pytest.raises(EmptyRoster):
        generate_team("x", [], max_size=2)


def test_generate_team_after_task_reads_routes():
    log = ProvenanceLog()
    route(Message("m", "csv"), _team(), log=log, sender="agent-a")
    route(Message("m", "chart"), _team(), log=log, sender="agent-b")
    team = generate_team("ignored", [], max_size=3, after_task_events=list(log))
    assert team.edges == [("agent-a", "agent-b", "observed route"), ("agent-b", "agent-a", "observed route")]
    assert [r.agent_id for r in team.roles] == ["agent-a", "agent-b"]


# ---- mediation and facades --------------------------------------------

def test_mediate_persists_contract_and_forks_both_parties(store):
    forker = RecordingForker()
    result = mediate("agent-1", "agent-2", "merge two reports", forker, store)

    assert result.contract.is_final
    assert result.contract.missing_clauses() == []
    assert result.child_ids == ["agent-1-child", "agent-2-child"]
    artifact = store.get_artifact(result.contract.artifact_id)
    assert artifact.kind == Kind.CONTRACT
    assert artifact.front_matter["status"] == "final"
    assert forker.calls == [
        ("agent-1", artifact.id, result.event.event_id),
        ("agent-2", artifact.id, result.event.event_id),
    ]
    assert result.event.outcome == Outcome.PENDING
    parsed = Contract.from_markdown(artifact.content, ["agent-1", "agent-2"])
    assert parsed.io_schema == result.contract.io_schema


def test_use_count_matches_validated_events_across_producers(store):
    skill = store.put_artifact(Kind.SKILL, "parse csv rows\n")
    other = store.put_artifact(Kind.SKILL, "draw charts\n")
    candidates = [Candidate(a.id, a.content) for a in (skill, other)]
    lens_select(candidates, "parse csv", k=1, log=store.log)
    store.migrate_tier(other.id, Tier.WARM, "manual")
    contract_id = mediate("agent-1", "agent-2", "merge two reports", RecordingForker(), store).contract.artifact_id
    store.record_use(skill.id, validated=True)
    store.record_use(contract_id, validated=True)
    store.record_use(contract_id, validated=False)

    for artifact in store.list_artifacts():
        assert artifact.use_count == store.validated_use_count(artifact.id), artifact.id
    assert store.get_artifact(contract_id).use_count == 1


def test_mediate_scripted_rounds_and_failures(store):
    rounds = [{"roles": "a leads"}, {"io_schema": "text in, text out"}, {"state_commitments": "none", "allowed_side_effects": "none"}]
    result = mediate("a", "b", "task", RecordingForker(), store, negotiator=ScriptedNegotiator(rounds))
    assert result.contract.negotiation_rounds == 3

    with pytest.raises(NegotiationFailed):
        mediate("a", "b", "task", RecordingForker(), store, negotiator=ScriptedNegotiator(rounds[:2]))
    with pytest.raises(InvalidParties):
        mediate("a", "a", "task", RecordingForker(), store)


def test_facade_filter():
    text = "status: ok\nsecret: hunter2\nresult: 42\n"
    assert facade_filter(text, FacadePolicy()) == text
    log = ProvenanceLog()
    policy = FacadePolicy(deny_patterns=("secret",), output_schema_keys=("result", "status"))
    assert facade_filter(text, policy, log=log) == "result: 42\nstatus: ok\n"
    assert facade_filter(text, policy, outbound=False) == "status: ok\nresult: 42\n"
    assert len(log) == 1


def test_scope_checks(store):
    scoped = store.put_artifact(Kind.SKILL, "x", front_matter={"task_scope": "t1"})
    open_ = store.put_artifact(Kind.SKILL, "y")
    assert scope_filter(store.list_artifacts(), "t2") == [open_]
    check_scope(scoped, "t1")
    check_scope(scoped, "t2", allow_cross_scope=True)
    with pytest.raises(ScopeViolation):
        check_scope(scoped, "t2")


# ---- supply chains and configs ----------------------------------------

def test_trace_chain_walks_to_root():
    log = ProvenanceLog()
    root = log.append(EventKind.ROUTE, "router", "agent-1", "{}")
    mid = log.append(EventKind.INHERIT, "agent-1", "agent-2", "fork", parent_event=root.event_id)
    leaf = log.append(EventKind.TOOL_CALL, "agent-2", "skill-0001", "read", parent_event=mid.event_id)
    chain = trace_chain(log, leaf.event_id)
    assert [e.event_id for e in chain.events] == [root.event_id, mid.event_id, leaf.event_id]
    assert chain.root == root
    assert len(trace_chain(log, root.event_id)) == 1


def test_write_binding_config_revises_in_place(store, settings):
    log = ProvenanceLog()
    decision = lens_select([Candidate("c1", "csv")], "csv", k=1, log=log)
    first = write_binding_config(store, "lens", "lexical", settings, decision.events)
    assert first.id == "lens-config"
    assert first.name == "lens.md"
    assert "decision: 1 c1" in first.content
    again = write_binding_config(store, "lens", "bm25", settings)
    assert again.version == 2
    assert again.content.startswith("scorer: bm25\n")
