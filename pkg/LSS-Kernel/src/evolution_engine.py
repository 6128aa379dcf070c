"""
evolution_engine.py - Patches, sandboxes, gated merges and the agent-level
genetic round.

Nothing here writes to the persistent store except ``select_merge`` and the
survivor bookkeeping at the end of ``genetic_round``; everything else runs in
copy-on-write sandbox stores.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from agent_runtime import AgentInstance, AgentRuntime, EndCriteria
from artifact_store import ArtifactStore, Kind, StoreSnapshot
from config import LssSettings
from constants import FRONT_MATTER_DELIMITER
from reasoner import LexicalReasoner, Reasoner, ScriptedReasoner, Transcript
from utils import InputError, InvariantError
from view_engine import StepRecord, View

logger = logging.getLogger(__name__)

MUTATION_OPS = ("drop-step", "swap-tool-return", "inject-fragment")
FITNESS_COLUMNS = ["candidate_id", "task_suite_id", "score", "token_cost", "verdict", "control_score"]

ReasonerFactory = Callable[[], Reasoner]


# --------------------------------- #
# errors
# --------------------------------- #

class HypothesisRequired(InputError):
    pass


class EmptySuite(InputError):
    pass


class NoMutations(InputError):
    pass


class PatchNotOpen(InvariantError):
    pass


# --------------------------------- #
# domain types
# --------------------------------- #

class PatchStatus(str, Enum):
    PROPOSED = "proposed"
    SANDBOXED = "sandboxed"
    MERGED = "merged"
    REJECTED = "rejected"


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"


@dataclass(frozen=True)
class FitnessReport:
    candidate_id: str
    task_suite_id: str
    score: float
    token_cost: int
    verdict: Verdict
    passed: int = 0
    total: int = 0
    control: Optional["FitnessReport"] = None

    def summary(self) -> str:
        text = f"fitness {self.score:.2f} ({self.passed}/{self.total}) on {self.task_suite_id}"
        if self.control is not None:
            text += f", control {self.control.score:.2f}"
        return text


@dataclass
class Patch:
    patch_id: str
    target_artifact: str
    hypothesis: str
    edit: str
    rollback_chain: List[int]
    status: PatchStatus = PatchStatus.PROPOSED
    reports: List[FitnessReport] = field(default_factory=list)


@dataclass
class SandboxEnv:
    sandbox_id: str
    base_snapshot: StoreSnapshot
    store: ArtifactStore
    depth: int = 1

    @property
    def overlay(self) -> Dict[str, object]:
        return {aid: self.store.get_artifact(aid) for aid in self.store.overlay_ids()}


@dataclass(frozen=True)
class ReplayTask:
    task_id: str
    intent: str
    responses: Tuple[str, ...] = ()
    expect: Tuple[str, ...] = ()
    forbid: Tuple[str, ...] = ()
    max_steps: int = 5

    def passes(self, transcript_text: str) -> bool:
        return (
            all(e in transcript_text for e in self.expect)
            and not any(f in transcript_text for f in self.forbid)
        )


@dataclass
class TaskSuite:
    suite_id: str
    tasks: List[ReplayTask]

    @classmethod
    def from_json(cls, data: Dict, suite_id: str = "suite") -> "TaskSuite":
        try:
            tasks = [
                ReplayTask(
                    task_id=str(t.get("id", f"task-{i}")),
                    intent=str(t["intent"]),
                    responses=tuple(str(r) for r in t.get("responses", [])),
                    expect=tuple(str(e) for e in t.get("expect", [])),
                    forbid=tuple(str(f) for f in t.get("forbid", [])),
                    max_steps=int(t.get("max_steps", 5)),
                )
                for i, t in enumerate(data.get("tasks", []))
            ]
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise InputError(f"Malformed task suite: {e}")
        return cls(suite_id=str(data.get("id", suite_id)), tasks=tasks)

    @classmethod
    def load(cls, path: Path) -> "TaskSuite":
        path = Path(path)
        if not path.exists():
            raise InputError(f"Task suite not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: {e}")
        return cls.from_json(data, suite_id=path.stem)


@dataclass(frozen=True)
class EvolvePolicy:
    cap: int
    pass_threshold: float
    mutation_ops: Tuple[str, ...] = MUTATION_OPS
    task_suite: Optional[str] = None

    @classmethod
    def defaults(cls, settings: LssSettings) -> "EvolvePolicy":
        return cls(cap=settings.merge_cap, pass_threshold=settings.pass_threshold)

    @classmethod
    def from_markdown(cls, text: str, settings: LssSettings) -> "EvolvePolicy":
        """Read ``cap:``, ``pass_threshold:``, ``mutation_ops:`` and ``task_suite:`` lines."""
        values: Dict[str, str] = {}
        for line in text.splitlines():
            if line.strip() == FRONT_MATTER_DELIMITER:
                continue
            key, sep, value = line.partition(":")
            if sep:
                values[key.strip()] = value.strip()
        policy = cls.defaults(settings)
        try:
            cap = int(values.get("cap", policy.cap))
            threshold = float(values.get("pass_threshold", policy.pass_threshold))
        except ValueError as e:
            raise InputError(f"evolve.md: {e}")
        if cap < 1 or not 0.0 <= threshold <= 1.0:
            raise InputError("evolve.md: cap must be >= 1 and pass_threshold within [0, 1]")
        ops = tuple(o for o in values.get("mutation_ops", "").replace(",", " ").split()) or policy.mutation_ops
        unknown = [o for o in ops if o not in MUTATION_OPS]
        if unknown:
            raise InputError(f"evolve.md: unknown mutation ops {unknown}")
        return cls(cap=cap, pass_threshold=threshold, mutation_ops=ops, task_suite=values.get("task_suite") or None)

    @classmethod
    def from_store(cls, store: ArtifactStore) -> "EvolvePolicy":
        evolve = store.list_artifacts(kind=Kind.EVOLVE)
        if not evolve:
            return cls.defaults(store.settings)
        latest = evolve[-1]
        header = "".join(f"{k}: {v}\n" for k, v in latest.front_matter.items())
        return cls.from_markdown(header + latest.content, store.settings)


@dataclass
class Mutant:
    candidate_id: str
    op: str
    transcript: Transcript
    fragment: Optional[str] = None
    report: Optional[FitnessReport] = None
    outputs: List[str] = field(default_factory=list)


@dataclass
class GeneticResult:
    survivors: List[AgentInstance]
    reports: List[FitnessReport]
    trace_ids: List[str]
    transcripts: Dict[str, Transcript]


# --------------------------------- #
# evolver
# --------------------------------- #

class Evolver:
    """Governance loop over one persistent store (and its runtime)."""

    def __init__(self, store: ArtifactStore, runtime: Optional[AgentRuntime] = None, policy: Optional[EvolvePolicy] = None):
        self.store = store
        self.runtime = runtime or AgentRuntime(store)
        self.settings = store.settings
        self.policy = policy or EvolvePolicy.from_store(store)
        self._patch_ids = itertools.count(1)
        self._sandbox_ids = itertools.count(1)
        self._generations = itertools.count(1)

    # ---- patches and sandboxes -----------------------------------------

    def propose_patch(self, target: str, new_body: str, hypothesis: str) -> Patch:
        """
        Raises:
            HypothesisRequired: blank hypothesis.
            NotFound: unknown target.
        """
        if not hypothesis or not hypothesis.strip():
            raise HypothesisRequired(f"Patch for {target} needs a hypothesis")
        artifact = self.store.get_artifact(target)
        patch = Patch(
            patch_id=f"patch-{next(self._patch_ids):04d}",
            target_artifact=target,
            hypothesis=hypothesis,
            edit=new_body,
            rollback_chain=[artifact.version],
        )
        logger.info("Proposed %s on %s: %s", patch.patch_id, target, hypothesis)
        return patch

    def open_sandbox(self, parent_sandbox: Optional[SandboxEnv] = None) -> SandboxEnv:
        source = parent_sandbox.store if parent_sandbox is not None else self.store
        snapshot = source.snapshot()
        return SandboxEnv(
            sandbox_id=f"sandbox-{next(self._sandbox_ids):04d}",
            base_snapshot=snapshot,
            store=ArtifactStore.from_snapshot(snapshot, settings=self.settings),
            depth=(parent_sandbox.depth + 1) if parent_sandbox is not None else 1,
        )

    def _sibling(self, sandbox: SandboxEnv) -> SandboxEnv:
        return SandboxEnv(
            sandbox_id=f"{sandbox.sandbox_id}-control",
            base_snapshot=sandbox.base_snapshot,
            store=ArtifactStore.from_snapshot(sandbox.base_snapshot, settings=self.settings),
            depth=sandbox.depth,
        )

    # ---- replay ---------------------------------------------------------

    def run_suite(
        self,
        sandbox: SandboxEnv,
        suite: TaskSuite,
        candidate_id: str,
        reasoner_factory: Optional[ReasonerFactory] = None,
        seed_instance: Optional[AgentInstance] = None,
        outputs: Optional[List[str]] = None,
        override_responses: bool = False,
    ) -> FitnessReport:
        """
        Replay every task in its own nested sandbox. A task passes when all
        its ``expect`` strings and none of its ``forbid`` strings appear in
        the outputs and tool feedback.

        A task's own scripted responses take precedence over
        ``reasoner_factory`` unless ``override_responses`` is set.

        Raises:
            EmptySuite: no tasks.
        """
        if not suite.tasks:
            raise EmptySuite(f"Task suite {suite.suite_id} has no tasks")
        factory = reasoner_factory or LexicalReasoner
        passed = 0
        tokens = 0

        for task in suite.tasks:
            nested = self.open_sandbox(sandbox)
            runtime = AgentRuntime(nested.store, settings=self.settings)
            criteria = EndCriteria.max_steps(task.max_steps)
            if seed_instance is not None:
                runtime.instances[seed_instance.instance_id] = seed_instance
                instance = runtime.fork_single(seed_instance, task.intent, self.settings.local_context_tokens)
                instance.end_criteria = criteria
            else:
                instance = runtime.create_instance(end_criteria=criteria)
            if task.responses and not override_responses:
                reasoner = ScriptedReasoner.from_responses(task.responses)
            else:
                reasoner = factory()

            runtime.run_cycle(
                instance,
                nested.store,
                task.intent,
                self.settings.local_context_tokens,
                reasoner,
                max_steps=task.max_steps,
            )
            steps = instance.trajectory.snapshot()
            text = "\n".join(f"{s.output}\n{s.feedback}" for s in steps)
            if outputs is not None:
                outputs.extend(s.output for s in steps)
            tokens += sum(s.view.total_tokens for s in steps)
            if task.passes(text):
                passed += 1

        score = passed / len(suite.tasks)
        return FitnessReport(
            candidate_id=candidate_id,
            task_suite_id=suite.suite_id,
            score=score,
            token_cost=tokens,
            verdict=Verdict.PASS if score >= self.policy.pass_threshold else Verdict.FAIL,
            passed=passed,
            total=len(suite.tasks),
        )

    def replay(self, suite: TaskSuite, reasoner_factory: Optional[ReasonerFactory] = None) -> FitnessReport:
        """Idle replay: score the current store on a suite without changing it."""
        return self.run_suite(self.open_sandbox(), suite, "current", reasoner_factory)

    def evaluate_in_sandbox(
        self,
        sandbox: SandboxEnv,
        patch: Patch,
        task_suite: TaskSuite,
        ab: bool = False,
        reasoner_factory: Optional[ReasonerFactory] = None,
    ) -> FitnessReport:
        """
        Apply the patch inside ``sandbox`` and replay the suite. With ``ab``
        the same suite also runs on an unpatched sibling and the report
        carries it as ``control``.

        Raises:
            EmptySuite: no tasks.
            PatchNotOpen: patch already merged or rejected.
        """
        if patch.status not in (PatchStatus.PROPOSED, PatchStatus.SANDBOXED):
            raise PatchNotOpen(f"{patch.patch_id} is {patch.status.value}")
        if not task_suite.tasks:
            raise EmptySuite(f"Task suite {task_suite.suite_id} has no tasks")

        control = None
        if ab:
            control = self.run_suite(self._sibling(sandbox), task_suite, f"{patch.patch_id}/control", reasoner_factory)

        sandbox.store.revise_artifact(patch.target_artifact, patch.edit, rationale=patch.hypothesis, author="evolver")
        report = self.run_suite(sandbox, task_suite, patch.patch_id, reasoner_factory)
        if control is not None:
            report = replace(report, control=control)

        patch.status = PatchStatus.SANDBOXED
        patch.reports.append(report)
        logger.info("%s: %s", patch.patch_id, report.summary())
        return report

    # ---- merge gate -----------------------------------------------------

    def _passes(self, report: FitnessReport, threshold: float) -> bool:
        if report.score < threshold:
            return False
        return report.control is None or report.score >= report.control.score

    def select_merge(
        self,
        patches: Sequence[Patch],
        pass_threshold: Optional[float] = None,
        cap: Optional[int] = None,
    ) -> List[Patch]:
        """
        Merge passing patches into the persistent store, at most ``cap`` per
        round: the best by score (ties by patch id), applied in patch id order.
        Failing patches are rejected; passing ones over the cap stay sandboxed.
        """
        threshold = self.policy.pass_threshold if pass_threshold is None else pass_threshold
        cap = self.policy.cap if cap is None else cap
        for patch in patches:
            if not patch.reports:
                raise InputError(f"{patch.patch_id} has no fitness report")

        passing = [p for p in patches if self._passes(p.reports[-1], threshold)]
        chosen = sorted(passing, key=lambda p: (-p.reports[-1].score, p.patch_id))[:cap]
        deferred = [p for p in passing if p not in chosen]

        merged = []
        for patch in sorted(chosen, key=lambda p: p.patch_id):
            report = patch.reports[-1]
            with self.store.edit_session(patch.target_artifact) as current:
                patch.rollback_chain.append(current.version)
                self.store.revise_artifact(
                    patch.target_artifact,
                    patch.edit,
                    rationale=f"{patch.hypothesis} [{patch.patch_id}: {report.summary()}]",
                    author="evolver",
                )
            patch.status = PatchStatus.MERGED
            merged.append(patch)

        for patch in deferred:
            logger.warning("%s passed but was deferred by the merge cap of %d", patch.patch_id, cap)
        for patch in patches:
            if patch not in passing:
                patch.status = PatchStatus.REJECTED
        return merged

    # ---- genetic round --------------------------------------------------

    def _mutate(self, op: str, transcript: Transcript, rng: random.Random) -> Tuple[Transcript, Optional[str]]:
        responses = list(transcript.responses)
        fragment = None
        if op == "drop-step":
            if responses:
                del responses[rng.randrange(len(responses))]
        elif op == "swap-tool-return":
            positions = sorted(p for p, alts in transcript.alternates.items() if alts and p < len(responses))
            if positions:
                position = rng.choice(positions)
                responses[position] = rng.choice(transcript.alternates[position])
        elif op == "inject-fragment":
            if transcript.fragments:
                fragment = rng.choice(transcript.fragments)
                if responses:
                    position = rng.randrange(len(responses))
                    responses[position] = f"{responses[position]}\n{fragment}"
                else:
                    responses.append(fragment)
        mutated = Transcript(
            responses=responses,
            alternates=dict(transcript.alternates),
            fragments=list(transcript.fragments),
            score_weights=dict(transcript.score_weights),
        )
        return mutated, fragment

    def _spawn(
        self,
        runtime: AgentRuntime,
        baseline: AgentInstance,
        candidate: Mutant,
        intent: str,
    ) -> AgentInstance:
        runtime.instances.setdefault(baseline.instance_id, baseline)
        child = runtime.fork_single(
            baseline, intent, self.settings.local_context_tokens, child_id=candidate.candidate_id
        )
        if candidate.fragment is not None:
            child.trajectory.append(
                StepRecord(view=View.empty(intent), intent="inject fragment", output=candidate.fragment),
                by=child.instance_id,
            )
        return child

    def genetic_round(
        self,
        baseline_instance: Union[str, AgentInstance],
        population_size: int,
        mutation_ops: Sequence[str],
        task_suite: TaskSuite,
        survivors: int,
        transcript: Transcript,
        seed: int = 0,
    ) -> GeneticResult:
        """
        Fork ``population_size`` mutated candidates of the baseline, score
        each in its own sandbox and keep the best ``survivors`` (ties by
        candidate index). Survivors are re-forked in the persistent runtime
        and their novel output lines distilled into a trace artifact.

        Raises:
            NoMutations: empty mutation set.
        """
        if not mutation_ops:
            raise NoMutations("genetic_round needs at least one mutation op")
        unknown = [o for o in mutation_ops if o not in MUTATION_OPS]
        if unknown:
            raise InputError(f"Unknown mutation ops: {unknown}")
        if not population_size >= survivors >= 1:
            raise InputError(f"Need population_size >= survivors >= 1 (got {population_size}, {survivors})")
        if not task_suite.tasks:
            raise EmptySuite(f"Task suite {task_suite.suite_id} has no tasks")

        baseline = self.runtime.get(baseline_instance)
        rng = random.Random(seed)
        generation = next(self._generations)
        # another Evolver may already have run generations on this runtime
        while any(i.startswith(f"{baseline.instance_id}/g{generation}-") for i in self.runtime.instances):
            generation = next(self._generations)
        intent = " ".join(t.intent for t in task_suite.tasks)
        known_lines = {line for s in baseline.trajectory for line in s.output.splitlines()}

        candidates: List[Mutant] = []
        for index in range(population_size):
            op = mutation_ops[index % len(mutation_ops)]
            mutated, fragment = self._mutate(op, transcript, rng)
            candidate = Mutant(
                candidate_id=f"{baseline.instance_id}/g{generation}-cand-{index}",
                op=op,
                transcript=mutated,
                fragment=fragment,
            )
            sandbox = self.open_sandbox()
            sandbox_runtime = AgentRuntime(sandbox.store, settings=self.settings)
            child = self._spawn(sandbox_runtime, baseline, candidate, intent)
            candidate.report = self.run_suite(
                sandbox,
                task_suite,
                candidate.candidate_id,
                reasoner_factory=lambda t=mutated: ScriptedReasoner(t),
                seed_instance=child,
                outputs=candidate.outputs,
                override_responses=True,
            )
            candidates.append(candidate)

        ranked = sorted(range(population_size), key=lambda i: (-candidates[i].report.score, i))[:survivors]

        kept: List[AgentInstance] = []
        trace_ids: List[str] = []
        for index in ranked:
            candidate = candidates[index]
            child = self._spawn(self.runtime, baseline, candidate, intent)
            novel = []
            for line in (l for out in candidate.outputs for l in out.splitlines()):
                if line.strip() and line not in known_lines and line not in novel:
                    novel.append(line)
            body = (
                f"candidate: {candidate.candidate_id}\n"
                f"mutation: {candidate.op}\n"
                f"{candidate.report.summary()}\n"
                + "".join(f"lesson: {line}\n" for line in novel)
            )
            trace = self.store.put_artifact(
                Kind.TRACE,
                body,
                front_matter={"name": f"lessons {candidate.candidate_id}", "agent": child.instance_id},
                author="evolver",
            )
            kept.append(child)
            trace_ids.append(trace.id)

        logger.info(
            "Genetic round on %s: %d candidates, survivors %s",
            baseline.instance_id, population_size, [c.instance_id for c in kept],
        )
        return GeneticResult(
            survivors=kept,
            reports=[c.report for c in candidates],
            trace_ids=trace_ids,
            transcripts={c.candidate_id: c.transcript for c in candidates},
        )


def write_fitness_tsv(reports: Sequence[FitnessReport], path: Path) -> Path:
    """One tab-separated record per candidate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(FITNESS_COLUMNS)
        for r in reports:
            writer.writerow([
                r.candidate_id,
                r.task_suite_id,
                f"{r.score:.4f}",
                r.token_cost,
                r.verdict.value,
                "" if r.control is None else f"{r.control.score:.4f}",
            ])
    return path
