"""
agent_runtime.py - Agent instances and the Project / Execute / Update /
Formulate cycle.

An instance is its trajectory: forks inherit curated slices of it, and the
class of an instance is the digest of its view sequence alone.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from artifact_store import Artifact, ArtifactStore, Kind
from binding_engine import Candidate, lens_select, scope_filter
from config import LssSettings
from constants import CYCLE_MARKERS, CYCLE_NAMES, DEFAULT_MAX_STEPS, HIGH_WATERMARK
from provenance import EventKind, Outcome
from reasoner import WRITE_TOOL, Output, Reasoner, is_unconfident, rationale_of
from utils import InputError, InvariantError
from view_engine import (
    FULL,
    StepRecord,
    Trajectory,
    View,
    ViewSegment,
    curate,
    estimate_tokens,
    expand_view,
    project,
)

logger = logging.getLogger(__name__)


# --------------------------------- #
# errors
# --------------------------------- #

class AgentTerminated(InvariantError):
    pass


class NothingToFormulate(InputError):
    pass


class UseForkSingle(InputError):
    pass


class UnknownAgent(InputError):
    pass


class InvalidCriteria(InputError):
    pass


# --------------------------------- #
# domain types
# --------------------------------- #

class Source(str, Enum):
    USER = "user"
    AGENT = "agent"
    SELF = "self"


@dataclass(frozen=True)
class Intent:
    text: str
    source: Source = Source.USER
    target: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise InputError("Intent text must not be empty")


class PredicateKind(str, Enum):
    REQUIRED_OUTPUT_PRESENT = "required_output_present"
    BUDGET_EXHAUSTED = "budget_exhausted"
    SIGNAL_RECEIVED = "signal_received"
    MAX_STEPS = "max_steps"


@dataclass(frozen=True)
class Predicate:
    kind: PredicateKind
    parameter: Union[str, int]


@dataclass
class EndCriteria:
    predicates: List[Predicate]
    termination_hooks: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.predicates:
            raise InvalidCriteria("End criteria need at least one predicate")

    @classmethod
    def max_steps(cls, n: int = DEFAULT_MAX_STEPS, hooks: Sequence[str] = ()) -> "EndCriteria":
        return cls([Predicate(PredicateKind.MAX_STEPS, n)], list(hooks))


class Status(str, Enum):
    ACTIVE = "active"
    TERMINATED = "terminated"


@dataclass
class AgentInstance:
    instance_id: str
    trajectory: Trajectory
    end_criteria: EndCriteria
    parent_ids: List[str] = field(default_factory=list)
    status: Status = Status.ACTIVE
    task_scope: Optional[str] = None
    signals: Set[str] = field(default_factory=set)
    fired: List[Predicate] = field(default_factory=list)
    pending_intents: List[Intent] = field(default_factory=list)
    fork_artifact_id: Optional[str] = None
    inherit_event_id: Optional[int] = None

    @property
    def active(self) -> bool:
        return self.status == Status.ACTIVE


@dataclass(frozen=True)
class AgentClassSignature:
    view_sequence_digest: str


class MappingStrategy(str, Enum):
    DEDICATED_AGENT = "DedicatedAgent"
    EMBEDDED_MECHANISM = "EmbeddedMechanism"
    COLLABORATION = "Collaboration"
    DERIVED_EXECUTION = "DerivedExecution"
    POST_EXECUTION_DERIVED = "PostExecutionDerived"
    SELF_DERIVED_LOOP = "SelfDerivedLoop"


@dataclass(frozen=True)
class InstanceMetrics:
    context_utilization: float
    ambiguity_flag: bool = False


@dataclass(frozen=True)
class ShiftPolicy:
    high_watermark: float = HIGH_WATERMARK


Tool = Callable[["AgentRuntime", AgentInstance, str], str]
Hook = Callable[["AgentRuntime", AgentInstance], None]
Formulator = Callable[[Trajectory], List[Intent]]


# --------------------------------- #
# free functions
# --------------------------------- #

def formulate(trajectory: Trajectory, formulator: Optional[Formulator] = None) -> List[Intent]:
    """
    Derive the next intents from the last output.

    The default formulator reads ``INTENT: <text> [@agent-id]`` lines.

    Raises:
        NothingToFormulate: empty trajectory.
    """
    if len(trajectory) == 0:
        raise NothingToFormulate(f"Trajectory of {trajectory.owner} is empty")
    if formulator is not None:
        return formulator(trajectory)

    intents = []
    for line in trajectory[-1].output.splitlines():
        if not line.startswith("INTENT:"):
            continue
        text = line[len("INTENT:"):].strip()
        target = None
        head, _, last = text.rpartition(" ")
        if last.startswith("@") and len(last) > 1:
            target = last[1:]
            text = head.strip()
        if text:
            intents.append(Intent(text=text, source=Source.AGENT, target=target))
    return intents


def class_signature(instance: AgentInstance) -> AgentClassSignature:
    """Digest of the ordered serialized views; intents and outputs do not count."""
    digest = hashlib.sha256()
    for step in instance.trajectory:
        raw = step.view.serialize().encode("utf-8")
        digest.update(f"{len(raw)}:".encode("ascii"))
        digest.update(raw)
    return AgentClassSignature(view_sequence_digest=digest.hexdigest())


def instance_metrics(instance: AgentInstance, context_window: int, ambiguity_flag: bool = False) -> InstanceMetrics:
    if len(instance.trajectory) == 0 or context_window <= 0:
        return InstanceMetrics(0.0, ambiguity_flag)
    used = instance.trajectory[-1].view.total_tokens
    return InstanceMetrics(min(1.0, used / context_window), ambiguity_flag)


def _runs(indices: Sequence[int]) -> List[Tuple[int, int]]:
    runs: List[Tuple[int, int]] = []
    for i in indices:
        if runs and runs[-1][1] == i - 1:
            runs[-1] = (runs[-1][0], i)
        else:
            runs.append((i, i))
    return runs


def _seed_step(artifact: Artifact, intent: str) -> StepRecord:
    cost = estimate_tokens(artifact.content)
    view = View(
        segments=(ViewSegment(artifact.id, artifact.content, FULL, cost),),
        intent_echo=intent,
        total_tokens=cost,
        budget=max(cost, 1),
    )
    return StepRecord(view=view, intent=intent, output=artifact.content)


# --------------------------------- #
# built-in tools and hooks
# --------------------------------- #

def _read_tool(runtime: "AgentRuntime", instance: AgentInstance, args: str) -> str:
    artifact_id = args.strip()
    artifact = runtime.store.get_artifact(artifact_id)
    runtime.store.record_use(artifact_id, validated=True, subject=instance.instance_id, evidence="read tool")
    return artifact.content[:runtime.settings.read_limit]


def _echo_tool(runtime: "AgentRuntime", instance: AgentInstance, args: str) -> str:
    return args


def _distill_summary(runtime: "AgentRuntime", instance: AgentInstance) -> None:
    outputs = [s.output.strip() for s in instance.trajectory if s.output.strip()]
    body = outputs[-1] + "\n" if outputs else ""
    runtime.store.put_artifact(
        Kind.MEMORY,
        body,
        front_matter={"name": f"summary {instance.instance_id}", "agent": instance.instance_id},
        author=instance.instance_id,
    )


def _archive_trajectory(runtime: "AgentRuntime", instance: AgentInstance) -> None:
    runtime.store.put_artifact(
        Kind.TRACE,
        instance.trajectory.serialize(),
        front_matter={"name": f"trajectory {instance.instance_id}", "agent": instance.instance_id},
        author=instance.instance_id,
    )


# --------------------------------- #
# runtime
# --------------------------------- #

class AgentRuntime:
    """Instance registry plus the tools and hooks those instances may call."""

    def __init__(self, store: ArtifactStore, settings: Optional[LssSettings] = None):
        self.store = store
        self.settings = settings or store.settings
        self.log = store.log
        self.instances: Dict[str, AgentInstance] = {}
        self.tools: Dict[str, Tool] = {"read": _read_tool, "echo": _echo_tool}
        self.hooks: Dict[str, Hook] = {
            "distill_summary": _distill_summary,
            "archive_trajectory": _archive_trajectory,
        }
        self._counter = 0

    def register_tool(self, name: str, tool: Tool) -> None:
        self.tools[name] = tool

    def register_hook(self, name: str, hook: Hook) -> None:
        self.hooks[name] = hook

    def _new_id(self) -> str:
        while True:
            self._counter += 1
            candidate = f"agent-{self._counter:04d}"
            if candidate not in self.instances:
                return candidate

    def create_instance(
        self,
        instance_id: Optional[str] = None,
        end_criteria: Optional[EndCriteria] = None,
        task_scope: Optional[str] = None,
    ) -> AgentInstance:
        instance_id = instance_id or self._new_id()
        if instance_id in self.instances:
            raise InputError(f"Agent {instance_id} already exists")
        instance = AgentInstance(
            instance_id=instance_id,
            trajectory=Trajectory(owner=instance_id),
            end_criteria=end_criteria or EndCriteria.max_steps(),
            task_scope=task_scope,
        )
        self.instances[instance_id] = instance
        return instance

    def get(self, instance: Union[str, AgentInstance]) -> AgentInstance:
        if isinstance(instance, AgentInstance):
            return instance
        try:
            return self.instances[instance]
        except KeyError:
            raise UnknownAgent(f"Unknown agent instance: {instance}")

    # ---- Execute -------------------------------------------------------

    def _dispatch(self, instance: AgentInstance, output: Output) -> str:
        feedback = [output.environment_feedback] if output.environment_feedback else []
        for action in output.actions:
            if action.tool == WRITE_TOOL:
                continue
            tool = self.tools.get(action.tool)
            if tool is None:
                feedback.append(f"[UnknownTool] {action.tool}")
                continue
            try:
                feedback.append(f"[{action.tool}] {tool(self, instance, action.args)}")
            except Exception as e:
                feedback.append(f"[ToolError] {action.tool}: {e}")
        return "\n".join(feedback)

    def execute_step(
        self,
        instance: Union[str, AgentInstance],
        view: View,
        intent: Union[str, Intent],
        reasoner: Reasoner,
        check_end: bool = True,
    ) -> Output:
        """
        Run one reasoning step and append (view, intent, output) to the trajectory.

        Tool failures land in the environment feedback; they never abort the step.
        With ``check_end=False`` the caller evaluates the end criteria itself.

        Raises:
            AgentTerminated: instance no longer accepts steps.
        """
        instance = self.get(instance)
        if not instance.active:
            raise AgentTerminated(f"{instance.instance_id} is terminated")
        text = intent.text if isinstance(intent, Intent) else intent

        output = reasoner.respond(view.serialize(), text, view.history_digest or instance.trajectory.digest())
        feedback = self._dispatch(instance, output)
        instance.trajectory.append(
            StepRecord(view=view, intent=text, output=output.text, feedback=feedback),
            by=instance.instance_id,
        )
        if check_end:
            self.evaluate_end_criteria(instance)
        return output.with_feedback(feedback)

    # ---- End criteria ---------------------------------------------------

    def _holds(self, instance: AgentInstance, predicate: Predicate) -> bool:
        steps = instance.trajectory.snapshot()
        if predicate.kind == PredicateKind.MAX_STEPS:
            return len(steps) >= int(predicate.parameter)
        if predicate.kind == PredicateKind.SIGNAL_RECEIVED:
            return str(predicate.parameter) in instance.signals
        if predicate.kind == PredicateKind.REQUIRED_OUTPUT_PRESENT:
            return any(str(predicate.parameter) in s.output for s in steps)
        if predicate.kind == PredicateKind.BUDGET_EXHAUSTED:
            return sum(s.view.total_tokens for s in steps) >= int(predicate.parameter)
        return False

    def evaluate_end_criteria(self, instance: Union[str, AgentInstance]) -> Tuple[bool, List[Predicate]]:
        """
        True iff any predicate holds. The first time that happens the
        termination hooks run, once, and the instance is terminated.
        """
        instance = self.get(instance)
        if not instance.active:
            return True, list(instance.fired)
        fired = [p for p in instance.end_criteria.predicates if self._holds(instance, p)]
        if not fired:
            return False, []

        instance.fired = fired
        # status flips first so a hook that re-evaluates cannot run hooks again
        instance.status = Status.TERMINATED
        for name in instance.end_criteria.termination_hooks:
            hook = self.hooks.get(name)
            if hook is None:
                logger.warning("Unknown termination hook %s on %s", name, instance.instance_id)
                continue
            hook(self, instance)
        logger.info("%s terminated by %s", instance.instance_id, ", ".join(p.kind.value for p in fired))
        return True, fired

    def deliver_signal(self, instance: Union[str, AgentInstance], name: str) -> None:
        self.get(instance).signals.add(name)

    # ---- Update ---------------------------------------------------------

    def _apply_writes(self, instance: AgentInstance, output: Output) -> List[str]:
        written = []
        for action in output.actions:
            if action.tool != WRITE_TOOL or not action.args:
                continue
            rationale = rationale_of(output.text) or f"write by {instance.instance_id}"
            body = action.body or ""
            if action.args in self.store:
                self.store.revise_artifact(action.args, body, rationale=rationale, author=instance.instance_id)
            else:
                self.store.put_artifact(Kind.DOCUMENT, body, artifact_id=action.args, author=instance.instance_id)
            written.append(action.args)
        return written

    # ---- Cycle ----------------------------------------------------------

    def run_cycle(
        self,
        instance: Union[str, AgentInstance],
        artifact_pool: Union[ArtifactStore, Iterable[Artifact]],
        intent: Union[str, Intent],
        budget: int,
        reasoner: Reasoner,
        max_steps: int = DEFAULT_MAX_STEPS,
        lens_selection: Optional[Sequence[str]] = None,
        expansion_budget: Optional[int] = None,
    ) -> Trajectory:
        """
        Loop Project -> Execute -> Update -> Formulate until the end criteria
        fire, no intent is formulated, or ``max_steps`` is reached.
        """
        if max_steps < 1:
            raise InputError(f"max_steps must be >= 1 (got {max_steps})")
        instance = self.get(instance)
        current = intent if isinstance(intent, Intent) else Intent(intent)
        expand_from: Optional[View] = None
        phase = 0

        for _ in range(max_steps):
            if not instance.active:
                break
            pool = list(artifact_pool)

            phase = 1
            logger.debug(CYCLE_MARKERS[phase])
            if expand_from is not None:
                wider = max(expansion_budget, expand_from.total_tokens)
                view = expand_view(
                    expand_from, pool, current.text, wider, self.settings.brief_limit,
                    task_scope=instance.task_scope,
                )
                expand_from = None
            else:
                view = project(
                    pool,
                    current.text,
                    instance.trajectory,
                    budget,
                    lens_selection=lens_selection,
                    brief_limit=self.settings.brief_limit,
                    task_scope=instance.task_scope,
                )

            phase = 2
            logger.debug(CYCLE_MARKERS[phase])
            output = self.execute_step(instance, view, current, reasoner, check_end=False)

            phase = 3
            logger.debug(CYCLE_MARKERS[phase])
            self._apply_writes(instance, output)
            # hooks see the store after this step's writes
            self.evaluate_end_criteria(instance)
            if not instance.active:
                break

            if expansion_budget and is_unconfident(output.text):
                expand_from = view
                continue

            phase = 4
            logger.debug(CYCLE_MARKERS[phase])
            # FIFO: intents formulated earlier run before newer ones
            instance.pending_intents.extend(formulate(instance.trajectory))
            if not instance.pending_intents:
                break
            current = instance.pending_intents.pop(0)

        logger.info(
            "%s finished cycle after %d steps (last phase: %s)",
            instance.instance_id, len(instance.trajectory), CYCLE_NAMES[phase],
        )
        return instance.trajectory

    # ---- Inheritance ----------------------------------------------------

    def _record_fork(
        self,
        child: AgentInstance,
        fragments: List[Tuple[str, List[int]]],
        intent: str,
        parent_event: Optional[int],
    ) -> None:
        lines = [f"parent: {pid}" for pid in child.parent_ids]
        for pid, indices in fragments:
            for start, end in _runs(indices):
                lines.append(f"fragment: {pid} steps {start}..{end}")
        artifact = self.store.put_artifact(
            Kind.FORK,
            "\n".join(lines) + "\n",
            front_matter={"name": f"fork {child.instance_id}", "child": child.instance_id, "intent": " ".join(intent.split())},
            author="inheritance-generator",
        )
        kept = sum(len(i) for _, i in fragments)
        event = self.log.append(
            kind=EventKind.INHERIT,
            subject=child.instance_id,
            object=",".join(child.parent_ids),
            evidence=f"{artifact.id}: kept {kept} steps",
            parent_event=parent_event,
            step=self.store.step,
            outcome=Outcome.PENDING,
        )
        child.fork_artifact_id = artifact.id
        child.inherit_event_id = event.event_id

    def _curated_fragment(self, parent: AgentInstance, intent: str, budget: int, owner: str) -> Tuple[List[StepRecord], List[int]]:
        positions = {id(step): i for i, step in enumerate(parent.trajectory.snapshot())}
        kept = curate(parent.trajectory, intent, budget, owner=owner).snapshot()
        return list(kept), [positions[id(s)] for s in kept]

    def fork_single(
        self,
        parent: Union[str, AgentInstance],
        intent: Union[str, Intent],
        budget: int,
        seed_artifact: Optional[Artifact] = None,
        parent_event: Optional[int] = None,
        child_id: Optional[str] = None,
    ) -> AgentInstance:
        """
        Derive a child seeded with the parent's steps curated for ``intent``.
        A ``seed_artifact`` (e.g. a contract) becomes the child's step 0.
        """
        parent = self.get(parent)
        text = intent.text if isinstance(intent, Intent) else intent
        child = self.create_instance(
            instance_id=child_id,
            end_criteria=EndCriteria(list(parent.end_criteria.predicates), list(parent.end_criteria.termination_hooks)),
            task_scope=parent.task_scope,
        )
        steps, indices = self._curated_fragment(parent, text, budget, child.instance_id)
        if seed_artifact is not None:
            child.trajectory.append(_seed_step(seed_artifact, text), by=child.instance_id)
        for step in steps:
            child.trajectory.append(step, by=child.instance_id)
        child.parent_ids = [parent.instance_id]
        self._record_fork(child, [(parent.instance_id, indices)], text, parent_event)
        logger.info("Forked %s from %s (%d inherited steps)", child.instance_id, parent.instance_id, len(steps))
        return child

    def fork_multi(
        self,
        parents: Sequence[Union[str, AgentInstance]],
        intent: Union[str, Intent],
        budget: int,
        parent_event: Optional[int] = None,
    ) -> AgentInstance:
        """
        Compose a child from per-parent curated fragments, in parent order.

        Raises:
            UseForkSingle: fewer than two parents.
        """
        if len(parents) < 2:
            raise UseForkSingle("fork_multi needs at least two parents")
        resolved = [self.get(p) for p in parents]
        text = intent.text if isinstance(intent, Intent) else intent
        share = max(1, budget // len(resolved))

        first = resolved[0]
        child = self.create_instance(
            end_criteria=EndCriteria(list(first.end_criteria.predicates), list(first.end_criteria.termination_hooks)),
            task_scope=first.task_scope,
        )
        fragments = []
        for parent in resolved:
            steps, indices = self._curated_fragment(parent, text, share, child.instance_id)
            for step in steps:
                child.trajectory.append(step, by=child.instance_id)
            fragments.append((parent.instance_id, indices))
        child.parent_ids = [p.instance_id for p in resolved]
        self._record_fork(child, fragments, text, parent_event)
        return child

    # ---- Pattern shifting -----------------------------------------------

    def shift_pattern(
        self,
        instance_metrics: InstanceMetrics,
        policy: Optional[ShiftPolicy] = None,
        subject: str = "pattern-shifter",
    ) -> MappingStrategy:
        """
        Threshold policy: high context use offloads to a derived child,
        ambiguity asks for collaboration, otherwise stay embedded.
        """
        policy = policy or ShiftPolicy(self.settings.high_watermark)
        utilization = instance_metrics.context_utilization
        if not 0.0 <= utilization <= 1.0:
            raise InputError(f"context_utilization must be within [0, 1] (got {utilization})")

        if utilization > policy.high_watermark:
            decision = MappingStrategy.DERIVED_EXECUTION
        elif instance_metrics.ambiguity_flag:
            decision = MappingStrategy.COLLABORATION
        else:
            decision = MappingStrategy.EMBEDDED_MECHANISM

        self.log.append(
            kind=EventKind.ROUTE,
            subject=subject,
            object=decision.value,
            evidence=(
                f"utilization={utilization:.4f} high_watermark={policy.high_watermark:.4f} "
                f"ambiguity={instance_metrics.ambiguity_flag}"
            ),
            step=self.store.step,
        )
        return decision


# --------------------------------- #
# role bundles
# --------------------------------- #

DEFAULT_BUNDLE = """worker: worker | DedicatedAgent
generator: agent-generator | DerivedExecution
lens: lens | SelfDerivedLoop
"""


@dataclass
class RoleBundle:
    """Maps logical patterns (lens, router, curator, ...) onto named agents."""

    bindings: Dict[str, Tuple[str, MappingStrategy]]

    @classmethod
    def from_text(cls, text: str) -> "RoleBundle":
        bindings = {}
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            pattern, sep, rest = line.partition(":")
            agent, bar, strategy = rest.partition("|")
            if not sep or not bar:
                raise InputError(f"Role bundle line {number}: expected 'pattern: agent | strategy'")
            try:
                bindings[pattern.strip()] = (agent.strip(), MappingStrategy(strategy.strip()))
            except ValueError:
                raise InputError(f"Role bundle line {number}: unknown strategy {strategy.strip()!r}")
        return cls(bindings)

    @classmethod
    def default(cls) -> "RoleBundle":
        return cls.from_text(DEFAULT_BUNDLE)

    @classmethod
    def load(cls, path: Optional[Path]) -> "RoleBundle":
        if path is None:
            return cls.default()
        path = Path(path)
        if not path.exists():
            raise InputError(f"Role bundle not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def agent_for(self, pattern: str) -> str:
        try:
            return self.bindings[pattern][0]
        except KeyError:
            raise InputError(f"Role bundle has no {pattern!r} binding")

    def to_text(self) -> str:
        return "".join(f"{p}: {a} | {s.value}\n" for p, (a, s) in self.bindings.items())


@dataclass
class LensFlowResult:
    selected_ids: List[str]
    lens_instance_id: str
    view: View


def run_lens_flow(
    runtime: AgentRuntime,
    worker: Union[str, AgentInstance],
    intent: str,
    k: int,
    reasoner: Reasoner,
    budget: int,
    bundle: Optional[RoleBundle] = None,
) -> LensFlowResult:
    """
    Worker -> Agent Generator -> Lens: the generator derives a lens child
    from the worker, the lens scores one brief at a time and hands back ids,
    then the worker projects with that selection.
    """
    bundle = bundle or RoleBundle.default()
    worker = runtime.get(worker)
    generator = bundle.agent_for("generator")

    lens = runtime.fork_single(worker, intent, budget)
    lens.end_criteria = EndCriteria([Predicate(PredicateKind.SIGNAL_RECEIVED, "lens_done")])

    artifacts = scope_filter(runtime.store.list_artifacts(), worker.task_scope)
    briefs = [a.content[:runtime.settings.brief_limit] for a in artifacts]
    decision = lens_select(
        [Candidate(a.id, a.content) for a in artifacts],
        intent,
        k,
        brief_limit=runtime.settings.brief_limit,
        scorer=reasoner.scorer_for(briefs),
        log=runtime.log,
        subject=f"{bundle.agent_for('lens')}:{lens.instance_id}",
        parent_event=lens.inherit_event_id,
        step=runtime.store.step,
    )
    runtime.deliver_signal(lens, "lens_done")
    runtime.evaluate_end_criteria(lens)
    logger.info("%s derived %s; lens picked %s", generator, lens.instance_id, decision.ids)

    view = project(
        artifacts,
        intent,
        worker.trajectory,
        budget,
        lens_selection=decision.ids,
        brief_limit=runtime.settings.brief_limit,
    )
    return LensFlowResult(selected_ids=decision.ids, lens_instance_id=lens.instance_id, view=view)
