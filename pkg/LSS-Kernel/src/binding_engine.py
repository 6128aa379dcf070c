"""
binding_engine.py - Lens selection, routing, index/team/contract generation,
facades and provenance supply chains.

Every operation that makes a choice writes at least one BindingEvent whose
evidence is enough to replay the choice (see ``verify_lens_decision`` and
``verify_route_decision``).
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Protocol,
    Sequence,
    Tuple,
)

from artifact_store import Artifact, ArtifactStore, Kind, NotFound
from config import LssSettings
from constants import BRIEF_LIMIT, MEDIATION_ROUNDS
from provenance import BindingEvent, EventKind, Outcome, ProvenanceLog
from utils import InputError, InvariantError, lexical_tokens, overlap_score

logger = logging.getLogger(__name__)

# (query, text) -> relevance
Scorer = Callable[[str, str], float]

CLAUSES = ("roles", "io_schema", "state_commitments", "allowed_side_effects")


# --------------------------------- #
# errors
# --------------------------------- #

class InvalidK(InputError):
    pass


class NoRoute(InputError):
    pass


class EmptyRoster(InputError):
    pass


class InvalidTeam(InputError):
    pass


class InvalidParties(InputError):
    pass


class NegotiationFailed(InvariantError):
    pass


class ScopeViolation(InvariantError):
    pass


class CorruptProvenance(InvariantError):
    pass


# --------------------------------- #
# task-scoped modularity
# --------------------------------- #

def scope_filter(
    artifacts: Iterable[Artifact],
    task_scope: Optional[str],
    allow_cross_scope: bool = False,
) -> List[Artifact]:
    return [a for a in artifacts if a.visible_from(task_scope, allow_cross_scope)]


def check_scope(artifact: Artifact, task_scope: Optional[str], allow_cross_scope: bool = False) -> None:
    if not artifact.visible_from(task_scope, allow_cross_scope):
        raise ScopeViolation(
            f"{artifact.id} is scoped to {artifact.task_scope!r}; binding from {task_scope!r} "
            "needs allow_cross_scope"
        )


# --------------------------------- #
# semantic lens
# --------------------------------- #

@dataclass(frozen=True)
class Candidate:
    id: str
    text: str


@dataclass
class LensDecision:
    ids: List[str]
    events: List[BindingEvent] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)


def lens_select(
    candidates: Sequence[Candidate],
    intent: str,
    k: int,
    brief_limit: int = BRIEF_LIMIT,
    scorer: Optional[Scorer] = None,
    log: Optional[ProvenanceLog] = None,
    subject: str = "lens",
    parent_event: Optional[int] = None,
    step: int = 0,
) -> LensDecision:
    """
    Score candidates one brief at a time and keep the top ``k``.

    Only the first ``brief_limit`` characters of a candidate ever reach the
    scorer, and only one brief is held at a time. Ties go to the lower
    candidate index.

    Raises:
        InvalidK: k < 1.
    """
    if k < 1:
        raise InvalidK(f"k must be >= 1 (got {k})")
    if brief_limit < 1:
        raise InputError(f"brief_limit must be >= 1 (got {brief_limit})")
    if not candidates:
        return LensDecision(ids=[])

    score = scorer or overlap_score
    scores: List[float] = []
    for candidate in candidates:
        scores.append(score(intent, candidate.text[:brief_limit]))

    if not any(scores):
        logger.warning("Lens scored every candidate 0 for intent %r; falling back to input order", intent[:60])

    ranked = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))[:k]
    decision = LensDecision(ids=[candidates[i].id for i in ranked], scores=scores)

    if log is not None:
        table = [[c.id, s] for c, s in zip(candidates, scores)]
        for rank, index in enumerate(ranked):
            evidence = json.dumps({
                "intent": intent,
                "k": k,
                "brief_limit": brief_limit,
                "rank": rank,
                "score": scores[index],
                "scores": table,
            })
            decision.events.append(log.append(
                kind=EventKind.LENS_SELECT,
                subject=subject,
                object=candidates[index].id,
                evidence=evidence,
                parent_event=parent_event,
                step=step,
            ))
    return decision


def verify_lens_decision(
    events: Sequence[BindingEvent],
    candidates: Optional[Sequence[Candidate]] = None,
    scorer: Optional[Scorer] = None,
) -> bool:
    """
    Replay a lens decision. Without candidates the recorded score table is
    re-ranked; with candidates every brief is re-scored first.
    """
    if not events:
        return True
    evidence = json.loads(events[0].evidence)
    k = evidence["k"]
    if candidates is None:
        table = [(cid, s) for cid, s in evidence["scores"]]
    else:
        score = scorer or overlap_score
        limit = evidence["brief_limit"]
        table = [(c.id, score(evidence["intent"], c.text[:limit])) for c in candidates]
    ranked = sorted(range(len(table)), key=lambda i: (-table[i][1], i))[:k]
    return [table[i][0] for i in ranked] == [e.object for e in events]


# --------------------------------- #
# index generator
# --------------------------------- #

@dataclass(frozen=True)
class IndexEntry:
    focal_id: str
    neighbor_id: str
    relation: str
    weight: int

    def to_line(self) -> str:
        return f"{self.focal_id} -> {self.neighbor_id} | {self.weight} | {self.relation}"


def index_entries(
    items: Sequence[Tuple[str, str]],
    max_degree: int,
    focal_id: Optional[str] = None,
) -> List[IndexEntry]:
    """Pointer graph over ``(id, text)`` pairs by shared unique tokens."""
    if max_degree < 1:
        raise InputError(f"max_degree must be >= 1 (got {max_degree})")
    tokens = {item_id: lexical_tokens(text) for item_id, text in items}
    focals = [focal_id] if focal_id is not None else [item_id for item_id, _ in items]

    entries: List[IndexEntry] = []
    for focal in focals:
        neighbors = []
        for other, _ in items:
            if other == focal:
                continue
            shared = tokens[focal] & tokens[other]
            if shared:
                neighbors.append((-len(shared), other, shared))
        neighbors.sort(key=lambda n: (n[0], n[1]))
        for negative, other, shared in neighbors[:max_degree]:
            entries.append(IndexEntry(focal, other, " ".join(sorted(shared)), -negative))
    return entries


def generate_index(
    artifact_pool: Sequence[Artifact],
    focal_id: Optional[str] = None,
    max_degree: int = 3,
    store: Optional[ArtifactStore] = None,
    name: str = "index",
) -> List[IndexEntry]:
    """
    Build index entries for every artifact (or only ``focal_id``) and, when a
    store is given, persist them as one kind=index artifact.

    Raises:
        NotFound: focal_id not in the pool.
    """
    pool = [a for a in artifact_pool if a.kind != Kind.INDEX]
    if focal_id is not None and focal_id not in {a.id for a in pool}:
        raise NotFound(f"Unknown focal artifact: {focal_id}")
    entries = index_entries([(a.id, a.content) for a in pool], max_degree, focal_id)
    if store is not None:
        body = "".join(e.to_line() + "\n" for e in entries)
        store.put_artifact(Kind.INDEX, body, front_matter={"name": name, "max_degree": str(max_degree)})
    return entries


def describe_candidates(
    candidates: Sequence[Candidate],
    entries: Sequence[IndexEntry],
    line_limit: int = BRIEF_LIMIT,
    n_tokens: int = 8,
    n_neighbors: int = 3,
) -> Dict[str, str]:
    """
    One compact index line per candidate: its rarest tokens across the pool
    first, then its strongest neighbors.
    """
    vocab = {c.id: lexical_tokens(c.text) for c in candidates}
    frequency = Counter(t for tokens in vocab.values() for t in tokens)
    neighbors: Dict[str, List[str]] = {}
    for entry in entries:
        neighbors.setdefault(entry.focal_id, []).append(entry.neighbor_id)

    lines = {}
    for c in candidates:
        distinctive = sorted(vocab[c.id], key=lambda t: (frequency[t], t))[:n_tokens]
        line = f"{c.id}: {' '.join(distinctive)}"
        near = neighbors.get(c.id, [])[:n_neighbors]
        if near:
            line += f" | near {' '.join(near)}"
        lines[c.id] = line[:line_limit]
    return lines


# --------------------------------- #
# teams and routing
# --------------------------------- #

@dataclass(frozen=True)
class Role:
    agent_id: str
    role_name: str
    responsibilities: str = ""
    capability_keywords: FrozenSet[str] = frozenset()


@dataclass(frozen=True)
class AgentProfile:
    agent_id: str
    capability_keywords: FrozenSet[str]
    role_name: str = ""


@dataclass
class TeamSpec:
    roles: List[Role]
    edges: List[Tuple[str, str, str]] = field(default_factory=list)
    artifact_id: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.roles:
            raise InvalidTeam("A team needs at least one role")
        declared = {r.agent_id for r in self.roles}
        for source, target, _ in self.edges:
            if source not in declared or target not in declared:
                raise InvalidTeam(f"Edge {source} -> {target} uses an undeclared role")

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def role(self, agent_id: str) -> Role:
        for r in self.roles:
            if r.agent_id == agent_id:
                return r
        raise NotFound(f"No role for agent {agent_id}")

    def to_markdown(self) -> str:
        lines = []
        for r in self.roles:
            lines.append(f"role: {r.agent_id}")
            lines.append(f"  name: {r.role_name}")
            lines.append(f"  responsibilities: {r.responsibilities}")
            lines.append(f"  keywords: {' '.join(sorted(r.capability_keywords))}")
        for source, target, purpose in self.edges:
            lines.append(f"edge: {source} -> {target} | {purpose}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_markdown(cls, text: str) -> "TeamSpec":
        roles: List[Dict[str, str]] = []
        edges: List[Tuple[str, str, str]] = []
        for line in text.splitlines():
            if line.startswith("role: "):
                roles.append({"agent_id": line[len("role: "):].strip()})
            elif line.startswith("edge: "):
                head, _, purpose = line[len("edge: "):].partition(" | ")
                source, _, target = head.partition(" -> ")
                edges.append((source.strip(), target.strip(), purpose.strip()))
            elif line.startswith("  ") and roles:
                key, _, value = line.strip().partition(": ")
                roles[-1][key.rstrip(":")] = value
        return cls(
            roles=[
                Role(
                    agent_id=r["agent_id"],
                    role_name=r.get("name", ""),
                    responsibilities=r.get("responsibilities", ""),
                    capability_keywords=frozenset(r.get("keywords", "").split()),
                )
                for r in roles
            ],
            edges=edges,
        )


@dataclass(frozen=True)
class Message:
    kind: str
    text: str


@dataclass
class RouteDecision:
    agent_id: str
    evidence: str
    event: Optional[BindingEvent] = None


def _keyword_score(text: str, keywords: FrozenSet[str]) -> int:
    return len(lexical_tokens(text) & {k.lower() for k in keywords})


def route(
    message: Message,
    team: TeamSpec,
    scorer: Optional[Callable[[str, FrozenSet[str]], float]] = None,
    log: Optional[ProvenanceLog] = None,
    sender: str = "router",
    parent_event: Optional[int] = None,
    step: int = 0,
) -> RouteDecision:
    """
    Forward a message to the role whose capability keywords overlap it most;
    ties go to the lexicographically smallest agent id.

    Raises:
        NoRoute: team has no roles.
    """
    if team is None or not team.roles:
        raise NoRoute("Cannot route without roles")
    score = scorer or _keyword_score
    scores = {r.agent_id: score(message.text, r.capability_keywords) for r in team.roles}
    winner = min(scores, key=lambda agent: (-scores[agent], agent))
    if not any(scores.values()):
        logger.warning("Router scored every role 0; defaulting to %s", winner)

    evidence = json.dumps({"message_kind": message.kind, "scores": dict(sorted(scores.items()))})
    event = None
    if log is not None:
        event = log.append(
            kind=EventKind.ROUTE,
            subject=sender,
            object=winner,
            evidence=evidence,
            parent_event=parent_event,
            step=step,
        )
    return RouteDecision(agent_id=winner, evidence=evidence, event=event)


def verify_route_decision(event: BindingEvent) -> bool:
    scores = json.loads(event.evidence)["scores"]
    return min(scores, key=lambda agent: (-scores[agent], agent)) == event.object


def generate_team(
    task_intent: str,
    available_agents: Sequence[AgentProfile],
    max_size: int,
    store: Optional[ArtifactStore] = None,
    log: Optional[ProvenanceLog] = None,
    after_task_events: Optional[Sequence[BindingEvent]] = None,
) -> TeamSpec:
    """
    Pick up to ``max_size`` agents by capability overlap and wire them as a
    star around the top scorer. With ``after_task_events`` the team is read
    off the observed route events instead.

    Raises:
        EmptyRoster: no agents to choose from.
    """
    if max_size < 1:
        raise InputError(f"max_size must be >= 1 (got {max_size})")
    profiles = {a.agent_id: a for a in available_agents}

    if after_task_events is not None:
        spec = _team_from_routes(after_task_events, profiles)
    else:
        if not available_agents:
            raise EmptyRoster("No agents available for the team")
        scores = {a.agent_id: _keyword_score(task_intent, a.capability_keywords) for a in available_agents}
        members = sorted(scores, key=lambda agent: (-scores[agent], agent))[:max_size]
        coordinator = members[0]
        spec = TeamSpec(
            roles=[_role_for(profiles[m], coordinator) for m in members],
            edges=[(coordinator, m, "delegate") for m in members[1:]],
        )
        if log is not None:
            evidence = json.dumps({"intent": task_intent, "scores": dict(sorted(scores.items()))})
            for m in members:
                log.append(EventKind.ROUTE, subject="team-generator", object=m, evidence=evidence, step=0)

    if store is not None:
        artifact = store.put_artifact(
            Kind.TEAM,
            spec.to_markdown(),
            front_matter={"name": f"team: {task_intent}"[:80].replace("\n", " ")},
        )
        spec.artifact_id = artifact.id
    return spec


def _role_for(profile: AgentProfile, coordinator: str) -> Role:
    name = profile.role_name or ("coordinator" if profile.agent_id == coordinator else "member")
    return Role(
        agent_id=profile.agent_id,
        role_name=name,
        responsibilities=" ".join(sorted(profile.capability_keywords)),
        capability_keywords=profile.capability_keywords,
    )


def _team_from_routes(events: Sequence[BindingEvent], profiles: Mapping[str, AgentProfile]) -> TeamSpec:
    edges: List[Tuple[str, str, str]] = []
    order: List[str] = []
    for event in events:
        if event.kind != EventKind.ROUTE:
            continue
        edge = (event.subject, event.object, "observed route")
        if edge not in edges:
            edges.append(edge)
        for agent in (event.subject, event.object):
            if agent not in order:
                order.append(agent)
    if not order:
        raise EmptyRoster("No route events to build a team from")
    coordinator = order[0]
    roles = [
        _role_for(profiles.get(agent, AgentProfile(agent, frozenset())), coordinator)
        for agent in order
    ]
    return TeamSpec(roles=roles, edges=edges)


# --------------------------------- #
# mediator
# --------------------------------- #

@dataclass
class Contract:
    parties: List[str]
    roles: str = ""
    io_schema: str = ""
    state_commitments: str = ""
    allowed_side_effects: str = ""
    negotiation_rounds: int = 0
    status: str = "draft"
    artifact_id: Optional[str] = None

    def missing_clauses(self) -> List[str]:
        return [c for c in CLAUSES if not getattr(self, c).strip()]

    @property
    def is_final(self) -> bool:
        return self.status == "final"

    def to_markdown(self) -> str:
        sections = [f"## {c}\n{getattr(self, c).strip()}\n" for c in CLAUSES]
        return "\n".join(sections)

    @classmethod
    def from_markdown(cls, text: str, parties: Sequence[str], status: str = "final") -> "Contract":
        clauses: Dict[str, List[str]] = {}
        current = None
        for line in text.splitlines():
            if line.startswith("## ") and line[3:].strip() in CLAUSES:
                current = line[3:].strip()
                clauses[current] = []
            elif current is not None:
                clauses[current].append(line)
        return cls(
            parties=list(parties),
            status=status,
            **{c: "\n".join(clauses.get(c, [])).strip() for c in CLAUSES},
        )


class Negotiator(Protocol):
    def propose(self, contract: Contract, round_index: int, task_intent: str) -> Mapping[str, str]:
        ...


class ScriptedNegotiator:
    """Replays one clause update per round; rounds past the script add nothing."""

    def __init__(self, rounds: Sequence[Mapping[str, str]]):
        self.rounds = list(rounds)

    def propose(self, contract: Contract, round_index: int, task_intent: str) -> Mapping[str, str]:
        if round_index < len(self.rounds):
            return self.rounds[round_index]
        return {}


class TemplateNegotiator:
    """Fills every clause in one round from the task intent."""

    def propose(self, contract: Contract, round_index: int, task_intent: str) -> Mapping[str, str]:
        lead, *others = contract.parties
        return {
            "roles": f"{lead}: lead; " + "; ".join(f"{p}: support" for p in others),
            "io_schema": f"input: {task_intent}\noutput: result text with a status line",
            "state_commitments": "each party revises only the artifacts it created",
            "allowed_side_effects": "artifact revisions with rationale; no external calls",
        }


class Forker(Protocol):
    def fork_single(
        self,
        parent: str,
        intent: str,
        budget: int,
        seed_artifact: Optional[Artifact] = None,
        parent_event: Optional[int] = None,
    ) -> object:
        ...


@dataclass
class MediationResult:
    contract: Contract
    child_ids: List[str]
    transcript: List[Dict[str, str]]
    event: Optional[BindingEvent] = None


def mediate(
    party_a: str,
    party_b: str,
    task_intent: str,
    forker: Forker,
    store: ArtifactStore,
    negotiator: Optional[Negotiator] = None,
    max_rounds: int = MEDIATION_ROUNDS,
    budget: int = 512,
) -> MediationResult:
    """
    Negotiate a contract between two agents, persist it, then fork one clean
    child per party seeded with the contract and a curated trajectory.

    Raises:
        InvalidParties: party_a == party_b.
        NegotiationFailed: clauses still missing after ``max_rounds``.
    """
    if party_a == party_b:
        raise InvalidParties(f"Mediation needs two distinct parties (got {party_a} twice)")
    negotiator = negotiator or TemplateNegotiator()
    contract = Contract(parties=[party_a, party_b])
    transcript: List[Dict[str, str]] = []

    for round_index in range(max_rounds):
        updates = dict(negotiator.propose(contract, round_index, task_intent))
        transcript.append(updates)
        for clause, text in updates.items():
            if clause in CLAUSES and text and text.strip():
                setattr(contract, clause, text)
        contract.negotiation_rounds = round_index + 1
        if not contract.missing_clauses():
            break

    missing = contract.missing_clauses()
    if missing:
        raise NegotiationFailed(
            f"Contract between {party_a} and {party_b} still lacks {', '.join(missing)} "
            f"after {contract.negotiation_rounds} rounds"
        )

    contract.status = "final"
    artifact = store.put_artifact(
        Kind.CONTRACT,
        contract.to_markdown(),
        front_matter={
            "name": f"contract {party_a} {party_b}",
            "parties": f"{party_a} {party_b}",
            "status": contract.status,
            "rounds": str(contract.negotiation_rounds),
        },
        author="mediator",
    )
    contract.artifact_id = artifact.id
    event = store.log.append(
        kind=EventKind.CONTRACT,
        subject="mediator",
        object=artifact.id,
        evidence=f"parties={party_a},{party_b} rounds={contract.negotiation_rounds}",
        step=store.step,
        # only record_use validates a binding of the artifact
        outcome=Outcome.PENDING,
    )

    children = []
    for party in (party_a, party_b):
        child = forker.fork_single(party, task_intent, budget, seed_artifact=artifact, parent_event=event.event_id)
        children.append(getattr(child, "instance_id", str(child)))
    logger.info("Mediated %s <-> %s in %d rounds; children %s", party_a, party_b, contract.negotiation_rounds, children)
    return MediationResult(contract=contract, child_ids=children, transcript=transcript, event=event)


# --------------------------------- #
# facade & filter
# --------------------------------- #

@dataclass(frozen=True)
class FacadePolicy:
    deny_patterns: Tuple[str, ...] = ()
    output_schema_keys: Tuple[str, ...] = ()


def facade_filter(
    text: str,
    policy: FacadePolicy,
    outbound: bool = True,
    log: Optional[ProvenanceLog] = None,
    subject: str = "facade",
    step: int = 0,
) -> str:
    """Drop lines containing a deny pattern; outbound, keep only schema keys in declared order."""
    if not policy.deny_patterns and not (outbound and policy.output_schema_keys):
        return text

    lines = text.splitlines()
    kept = [line for line in lines if not any(p in line for p in policy.deny_patterns)]
    if outbound and policy.output_schema_keys:
        values: Dict[str, str] = {}
        for line in kept:
            key, sep, value = line.partition(":")
            key = key.strip()
            if sep and key in policy.output_schema_keys and key not in values:
                values[key] = value.strip()
        kept = [f"{k}: {values[k]}" for k in policy.output_schema_keys if k in values]

    filtered = "\n".join(kept)
    if kept and text.endswith("\n"):
        filtered += "\n"
    if log is not None:
        log.append(
            kind=EventKind.FACADE,
            subject=subject,
            object="outbound" if outbound else "inbound",
            evidence=f"kept {len(kept)} of {len(lines)} lines",
            step=step,
        )
    return filtered


# --------------------------------- #
# supply chains
# --------------------------------- #

@dataclass(frozen=True)
class SupplyChain:
    events: Tuple[BindingEvent, ...]

    def __len__(self) -> int:
        return len(self.events)

    @property
    def root(self) -> BindingEvent:
        return self.events[0]


def trace_chain(log: ProvenanceLog, event_id: int) -> SupplyChain:
    """
    Walk parent links to the root and return the chain root first.

    Raises:
        EventNotFound: unknown event.
        CorruptProvenance: the log on disk contains a cycle.
    """
    chain = [log.get(event_id)]
    seen = {event_id}
    while chain[-1].parent_event is not None:
        parent_id = chain[-1].parent_event
        if parent_id in seen:
            raise CorruptProvenance(f"Cycle through event {parent_id}")
        seen.add(parent_id)
        chain.append(log.get(parent_id))
    return SupplyChain(events=tuple(reversed(chain)))


# --------------------------------- #
# lens.md / route.md
# --------------------------------- #

def write_binding_config(
    store: ArtifactStore,
    role: str,
    scorer_name: str,
    settings: LssSettings,
    events: Sequence[BindingEvent] = (),
) -> Artifact:
    """Persist the scorer configuration and last decisions of a lens or router."""
    if role not in ("lens", "route"):
        raise InputError(f"Unknown binding role: {role}")
    lines = [f"scorer: {scorer_name}"]
    if role == "lens":
        lines += [f"k: {settings.top_k}", f"brief_limit: {settings.brief_limit}"]
    for event in events:
        lines.append(f"decision: {event.event_id} {event.object}")
    body = "\n".join(lines) + "\n"

    artifact_id = f"{role}-config"
    if artifact_id in store:
        store.revise_artifact(artifact_id, body, rationale=f"{role} configuration refreshed", author=role)
        return store.get_artifact(artifact_id)
    return store.put_artifact(
        Kind.INDEX,
        body,
        front_matter={"name": f"{role}.md", "role": role},
        artifact_id=artifact_id,
        author=role,
    )
