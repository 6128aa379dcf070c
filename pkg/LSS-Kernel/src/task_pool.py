"""
task_pool.py - File-mediated task rounds: generate, claim, log, complete, review.

Tasks are kind=task artifacts; every state change is a revision, so the
palimpsest of a task is its full audit trail. Results go to an append-only
result memory (``result_memory.tsv`` under the store root).
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from artifact_store import Artifact, ArtifactStore, ConcurrentEdit, Kind
from binding_engine import Message, RouteDecision, TeamSpec, route
from constants import RESULT_MEMORY_FILE
from utils import InputError, InvariantError, escape_field, sha256_text, unescape_field
from view_engine import estimate_tokens

logger = logging.getLogger(__name__)


class TaskState(str, Enum):
    PENDING = "pending"
    CLAIMED = "claimed"
    EXECUTING = "executing"
    DONE = "done"
    FAILED = "failed"
    REVIEWED = "reviewed"


class RoundVerdict(str, Enum):
    OPEN = "open"
    ACCEPTED = "accepted"
    ITERATE = "iterate"


OPERATIONS = ("claim", "append_log", "complete_success", "complete_failure", "review")

TRANSITIONS: Dict[Tuple[TaskState, str], TaskState] = {
    (TaskState.PENDING, "claim"): TaskState.CLAIMED,
    (TaskState.CLAIMED, "append_log"): TaskState.EXECUTING,
    (TaskState.EXECUTING, "append_log"): TaskState.EXECUTING,
    (TaskState.EXECUTING, "complete_success"): TaskState.DONE,
    (TaskState.EXECUTING, "complete_failure"): TaskState.FAILED,
    (TaskState.DONE, "review"): TaskState.REVIEWED,
    (TaskState.FAILED, "review"): TaskState.REVIEWED,
}


class EmptyRound(InputError):
    pass


class AlreadyClaimed(InvariantError):
    pass


class IllegalTransition(InvariantError):
    pass


class RoundIncomplete(InvariantError):
    pass


def next_state(state: TaskState, operation: str) -> TaskState:
    """
    Raises:
        AlreadyClaimed: claim on a task that is not pending.
        IllegalTransition: any other edge missing from the table.
    """
    target = TRANSITIONS.get((TaskState(state), operation))
    if target is not None:
        return target
    if operation == "claim":
        raise AlreadyClaimed(f"Task in state {TaskState(state).value} cannot be claimed")
    raise IllegalTransition(f"{operation} is not allowed from {TaskState(state).value}")


SECTIONS = ("Intent", "Log", "Result")


def _escape_line(line: str) -> str:
    """Section headers and backslashes inside free text get a leading backslash."""
    if line.startswith("\\") or line.startswith("## "):
        return "\\" + line
    return line


def _unescape_line(line: str) -> str:
    return line[1:] if line.startswith("\\") else line


def _escape_block(text: str) -> str:
    return "".join(_escape_line(line) + "\n" for line in text.split("\n"))


@dataclass(frozen=True)
class Task:
    task_id: str
    round: int
    intent_text: str
    state: TaskState
    assignee: Optional[str] = None
    log: Tuple[str, ...] = ()
    result: str = ""
    result_digest: str = ""

    @classmethod
    def from_artifact(cls, artifact: Artifact) -> "Task":
        sections: Dict[str, List[str]] = {name: [] for name in SECTIONS}
        current = None
        for line in artifact.content.splitlines():
            if line.startswith("## ") and line[3:] in sections:
                current = line[3:]
            elif current is not None:
                sections[current].append(_unescape_line(line))
        meta = artifact.front_matter
        return cls(
            task_id=artifact.id,
            round=int(meta.get("round", 1)),
            intent_text="\n".join(sections["Intent"]).strip(),
            state=TaskState(meta.get("state", TaskState.PENDING.value)),
            assignee=meta.get("assignee") or None,
            log=tuple(l[2:] for l in sections["Log"] if l.startswith("- ")),
            result="\n".join(sections["Result"]).strip(),
            result_digest=meta.get("result_digest", ""),
        )

    def to_body(self) -> str:
        parts = ["## Intent\n", _escape_block(self.intent_text), "## Log\n"]
        parts += [f"- {entry}\n" for entry in self.log]
        parts.append("## Result\n")
        if self.result:
            parts.append(_escape_block(self.result))
        return "".join(parts)


@dataclass
class Round:
    round_number: int
    task_ids: List[str]
    verdict: RoundVerdict = RoundVerdict.OPEN


@dataclass(frozen=True)
class MemoryEntry:
    round: int
    task_id: str
    status: str
    summary: str

    def to_line(self) -> str:
        return "\t".join([str(self.round), self.task_id, self.status, escape_field(self.summary)])


class ResultMemory:
    """Append-only; one entry per task that reached done or failed."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.entries: List[MemoryEntry] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                round_number, task_id, status, summary = line.split("\t")
                self.entries.append(MemoryEntry(int(round_number), task_id, status, unescape_field(summary)))

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: MemoryEntry) -> MemoryEntry:
        with self._lock:
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8", newline="\n") as f:
                    f.write(entry.to_line() + "\n")
            self.entries.append(entry)
        return entry

    def for_round(self, round_number: int) -> List[MemoryEntry]:
        return [e for e in self.entries if e.round == round_number]


@dataclass
class ReviewResult:
    verdict: RoundVerdict
    halted: bool
    round_number: int


Reviewer = Callable[[List[Task], List[MemoryEntry]], RoundVerdict]


def accept_when_all_done(tasks: List[Task], memory: List[MemoryEntry]) -> RoundVerdict:
    """Default reviewer: any failed task asks for another round."""
    if all(e.status == TaskState.DONE.value for e in memory):
        return RoundVerdict.ACCEPTED
    return RoundVerdict.ITERATE


class TaskPool:
    def __init__(self, store: ArtifactStore, memory: Optional[ResultMemory] = None):
        self.store = store
        self.settings = store.settings
        if memory is None:
            memory = ResultMemory(store.root / RESULT_MEMORY_FILE if store.root is not None else None)
        self.memory = memory
        self.rounds: Dict[int, Round] = {}
        self._lock = threading.RLock()
        self._load_rounds()

    def _load_rounds(self) -> None:
        for artifact in self.store.list_artifacts(kind=Kind.TASK):
            number = int(artifact.front_matter.get("round", 1))
            entry = self.rounds.setdefault(number, Round(number, []))
            entry.task_ids.append(artifact.id)
            verdict = artifact.front_matter.get("round_verdict")
            if verdict:
                entry.verdict = RoundVerdict(verdict)

    def get_task(self, task_id: str) -> Task:
        artifact = self.store.get_artifact(task_id)
        if artifact.kind != Kind.TASK:
            raise InputError(f"{task_id} is not a task")
        return Task.from_artifact(artifact)

    def tasks(self, round_number: int) -> List[Task]:
        return [self.get_task(t) for t in self.rounds[round_number].task_ids]

    def _write(self, task: Task, rationale: str, author: str, expected_version: int, extra: Optional[Dict[str, str]] = None) -> Task:
        meta = {"state": task.state.value, "assignee": task.assignee or "", "result_digest": task.result_digest}
        meta.update(extra or {})
        self.store.revise_artifact(
            task.task_id,
            task.to_body(),
            rationale=rationale,
            author=author,
            expected_version=expected_version,
            front_matter=meta,
        )
        return self.get_task(task.task_id)

    # ---- Generate & Dispatch ---------------------------------------------

    def generate_round(self, intent: str, task_texts: Sequence[str], cap: Optional[int] = None) -> Optional[Round]:
        """
        Materialize up to ``cap`` pending tasks for the next round.

        Returns None (with a warning) once ``max_rounds`` rounds exist.

        Raises:
            EmptyRound: no task texts.
        """
        if not task_texts:
            raise EmptyRound("A round needs at least one task")
        cap = self.settings.round_cap if cap is None else cap
        if cap < 1:
            raise InputError(f"Round cap must be >= 1 (got {cap})")

        with self._lock:
            number = max(self.rounds, default=0) + 1
            if number > self.settings.max_rounds:
                logger.warning("Round %d exceeds the limit of %d rounds; not generated", number, self.settings.max_rounds)
                return None

            for text in task_texts[cap:]:
                logger.warning("Round %d is capped at %d tasks; rejected: %s", number, cap, " ".join(text.split())[:80])

            round_ = Round(number, [])
            for index, text in enumerate(task_texts[:cap], start=1):
                task = Task(task_id=f"r{number:02d}-t{index:02d}", round=number, intent_text=text, state=TaskState.PENDING)
                self.store.put_artifact(
                    Kind.TASK,
                    task.to_body(),
                    front_matter={
                        "name": " ".join(text.split())[:80] or task.task_id,
                        "round": str(number),
                        "state": task.state.value,
                        "assignee": "",
                        "goal": " ".join(intent.split()),
                    },
                    artifact_id=task.task_id,
                    author="task-generator",
                )
                round_.task_ids.append(task.task_id)
            self.rounds[number] = round_
            logger.info("Generated round %d with %d tasks", number, len(round_.task_ids))
            return round_

    def claim_task(self, task_id: str, agent_id: str) -> Task:
        """
        Raises:
            AlreadyClaimed: task is not pending, or another pool on the same
                store claimed it first.
        """
        with self._lock:
            artifact = self.store.get_artifact(task_id)
            task = Task.from_artifact(artifact)
            state = next_state(task.state, "claim")
            claimed = replace(task, state=state, assignee=agent_id)
            try:
                return self._write(claimed, f"claimed by {agent_id}", agent_id, artifact.version)
            except ConcurrentEdit as e:
                # claim is the only edge out of pending, so the other writer is a claimant
                raise AlreadyClaimed(f"{task_id} was claimed by another pool first") from e

    def dispatch(self, task_id: str, agent_id: str) -> Task:
        """Push-style assignment; claims on behalf of ``agent_id``."""
        return self.claim_task(task_id, agent_id)

    def dispatch_routed(self, task_id: str, team: TeamSpec) -> Tuple[Task, RouteDecision]:
        task = self.get_task(task_id)
        decision = route(Message("intent", task.intent_text), team, log=self.store.log, step=self.store.step)
        return self.claim_task(task_id, decision.agent_id), decision

    # ---- Execute & Log ----------------------------------------------------

    def append_log(self, task_id: str, entry: str) -> Task:
        """
        Raises:
            IllegalTransition: task not claimed or executing.
        """
        with self._lock:
            artifact = self.store.get_artifact(task_id)
            task = Task.from_artifact(artifact)
            state = next_state(task.state, "append_log")
            line = " ".join(entry.split())
            logged = replace(task, state=state, log=task.log + (line,))
            return self._write(logged, "execution log", task.assignee or "worker", artifact.version)

    def complete_task(self, task_id: str, success: bool, summary: str) -> Tuple[Task, MemoryEntry]:
        """
        Raises:
            IllegalTransition: task not executing.
        """
        with self._lock:
            artifact = self.store.get_artifact(task_id)
            task = Task.from_artifact(artifact)
            state = next_state(task.state, "complete_success" if success else "complete_failure")
            finished = replace(
                task,
                state=state,
                result=summary.strip(),
                result_digest=sha256_text(summary.strip())[:16],
            )
            finished = self._write(finished, f"completed: {state.value}", task.assignee or "worker", artifact.version)
            entry = self.memory.append(MemoryEntry(task.round, task_id, state.value, " ".join(summary.split())))
            return finished, entry

    # ---- Review & Iterate -------------------------------------------------

    def review_round(self, round_: Round, reviewer: Optional[Reviewer] = None) -> ReviewResult:
        """
        Judge a finished round and mark its tasks reviewed.

        ``halted`` is True when the verdict is accepted or when no further
        round is allowed.

        Raises:
            RoundIncomplete: some task is not done or failed.
        """
        reviewer = reviewer or accept_when_all_done
        with self._lock:
            tasks = [self.get_task(t) for t in round_.task_ids]
            open_tasks = [t.task_id for t in tasks if t.state not in (TaskState.DONE, TaskState.FAILED)]
            if open_tasks:
                raise RoundIncomplete(f"Round {round_.round_number} has unfinished tasks: {', '.join(open_tasks)}")

            verdict = RoundVerdict(reviewer(tasks, self.memory.for_round(round_.round_number)))
            for task in tasks:
                reviewed = replace(task, state=next_state(task.state, "review"))
                self._write(
                    reviewed,
                    f"reviewed: {verdict.value}",
                    "reviewer",
                    self.store.get_artifact(task.task_id).version,
                    extra={"round_verdict": verdict.value},
                )
            round_.verdict = verdict
            self.rounds[round_.round_number] = round_

        halted = verdict == RoundVerdict.ACCEPTED or round_.round_number >= self.settings.max_rounds
        if verdict == RoundVerdict.ITERATE and halted:
            logger.warning("Round %d asked to iterate but the limit of %d rounds is reached", round_.round_number, self.settings.max_rounds)
        return ReviewResult(verdict=verdict, halted=halted, round_number=round_.round_number)

    def round_trace(self) -> List[Dict[str, object]]:
        """Per round: task counts by state and logged tokens per assignee."""
        trace = []
        for number in sorted(self.rounds):
            tasks = self.tasks(number)
            tokens: Dict[str, int] = {}
            for task in tasks:
                if task.assignee:
                    tokens[task.assignee] = tokens.get(task.assignee, 0) + sum(estimate_tokens(e) for e in task.log)
            counts: Dict[str, int] = {}
            for task in tasks:
                counts[task.state.value] = counts.get(task.state.value, 0) + 1
            trace.append({
                "round": number,
                "tasks": len(tasks),
                "states": counts,
                "verdict": self.rounds[number].verdict.value,
                "tokens_by_assignee": dict(sorted(tokens.items())),
            })
        return trace
