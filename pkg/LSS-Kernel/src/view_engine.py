"""
view_engine.py - Budgeted views over the artifact pool and trajectory curation.

Disclosure levels:
    0  metadata line (name + kind)
    1  brief, at most ``brief_limit`` characters of the body
    2  full body
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

from artifact_store import Artifact
from constants import BRIEF_LIMIT
from utils import InputError, InvariantError, count_tokens, overlap_score, sha256_text

logger = logging.getLogger(__name__)

# (text, limit) -> shorter text
Summarizer = Callable[[str, int], str]
# (intent, output text) -> relevance
StepScorer = Callable[[str, str], float]

FULL = 2
BRIEF = 1
METADATA = 0


class InvalidBudget(InputError):
    pass


class InvalidBranchCount(InputError):
    pass


class EmptyDistillate(InputError):
    pass


class ForeignWrite(InvariantError):
    """Only the owning agent may append to a trajectory."""
    pass


def estimate_tokens(text: str) -> int:
    return count_tokens(text)


@dataclass(frozen=True)
class ViewSegment:
    source_artifact_id: str
    text: str
    disclosure_level: int
    token_cost: int


@dataclass(frozen=True)
class View:
    segments: Tuple[ViewSegment, ...]
    intent_echo: str
    total_tokens: int
    budget: int
    history_digest: str = ""

    @classmethod
    def empty(cls, intent: str = "", budget: int = 1, history_digest: str = "") -> "View":
        return cls(segments=(), intent_echo=intent, total_tokens=0, budget=budget, history_digest=history_digest)

    @property
    def source_ids(self) -> List[str]:
        return [s.source_artifact_id for s in self.segments]

    def level_of(self, artifact_id: str) -> Optional[int]:
        for segment in self.segments:
            if segment.source_artifact_id == artifact_id:
                return segment.disclosure_level
        return None

    def serialize(self) -> str:
        return "".join(
            f"### {s.source_artifact_id} [L{s.disclosure_level}]\n{s.text}\n"
            for s in self.segments
        )


@dataclass(frozen=True)
class StepRecord:
    view: View
    intent: str
    output: str
    feedback: str = ""


@dataclass
class Trajectory:
    owner: str
    steps: List[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self) -> Iterator[StepRecord]:
        return iter(list(self.steps))

    def __getitem__(self, index: int) -> StepRecord:
        return self.steps[index]

    def append(self, step: StepRecord, by: Optional[str] = None) -> int:
        """Append one step and return its index."""
        if by is not None and by != self.owner:
            raise ForeignWrite(f"{by} cannot write to the trajectory of {self.owner}")
        self.steps.append(step)
        return len(self.steps) - 1

    def snapshot(self) -> Tuple[StepRecord, ...]:
        return tuple(self.steps)

    def serialize(self) -> str:
        parts = []
        for index, step in enumerate(self.steps):
            parts.append(f"== step {index} ==\n")
            parts.append(f"-- view --\n{step.view.serialize()}")
            parts.append(f"-- intent --\n{step.intent}\n")
            parts.append(f"-- output --\n{step.output}\n")
            parts.append(f"-- feedback --\n{step.feedback}\n")
        return "".join(parts)

    def digest(self) -> str:
        return sha256_text(self.serialize())


# --------------------------------- #
# projection
# --------------------------------- #

def disclose(
    artifact: Artifact,
    level: int,
    brief_limit: int = BRIEF_LIMIT,
    summarizer: Optional[Summarizer] = None,
) -> str:
    if level <= METADATA:
        return artifact.metadata_line()
    if level == BRIEF:
        if summarizer is not None:
            return summarizer(artifact.content, brief_limit)[:brief_limit]
        return artifact.content[:brief_limit]
    return artifact.content


def rank_artifacts(pool: Iterable[Artifact], intent: str) -> List[Artifact]:
    """Overlap of intent with name + body, descending; ties by ascending id."""
    return sorted(
        pool,
        key=lambda a: (-overlap_score(intent, f"{a.name} {a.content}"), a.id),
    )


def _fit(
    artifact: Artifact,
    level: int,
    room: int,
    brief_limit: int,
    summarizer: Optional[Summarizer],
) -> Optional[ViewSegment]:
    """Requested level, then one level lower, else nothing."""
    for attempt in (level, level - 1):
        if attempt < METADATA:
            break
        text = disclose(artifact, attempt, brief_limit, summarizer)
        cost = estimate_tokens(text)
        if cost <= room:
            return ViewSegment(artifact.id, text, attempt, cost)
    return None


def project(
    artifact_pool: Iterable[Artifact],
    intent: str,
    trajectory: Optional[Trajectory],
    budget: int,
    lens_selection: Optional[Sequence[str]] = None,
    level: int = FULL,
    brief_limit: int = BRIEF_LIMIT,
    task_scope: Optional[str] = None,
    allow_cross_scope: bool = False,
    summarizer: Optional[Summarizer] = None,
) -> View:
    """
    Assemble a step-specific View within ``budget`` tokens.

    With ``lens_selection`` the segments come from those ids in lens order;
    otherwise from the default lexical ranking. Each segment goes in at
    ``level`` or one level lower under backpressure, or is skipped.

    Raises:
        InvalidBudget: budget <= 0.
    """
    if budget <= 0:
        raise InvalidBudget(f"View budget must be positive (got {budget})")

    pool = [a for a in artifact_pool if a.visible_from(task_scope, allow_cross_scope)]
    if lens_selection is not None:
        by_id = {a.id: a for a in pool}
        ordered = [by_id[i] for i in dict.fromkeys(lens_selection) if i in by_id]
    else:
        ordered = rank_artifacts(pool, intent)

    segments: List[ViewSegment] = []
    total = 0
    for artifact in ordered:
        segment = _fit(artifact, level, budget - total, brief_limit, summarizer)
        if segment is None:
            logger.debug("Backpressure skipped %s", artifact.id)
            continue
        segments.append(segment)
        total += segment.token_cost

    return View(
        segments=tuple(segments),
        intent_echo=intent,
        total_tokens=total,
        budget=budget,
        history_digest=trajectory.digest() if trajectory is not None else "",
    )


def expand_view(
    view: View,
    artifact_pool: Iterable[Artifact],
    intent: str,
    budget: int,
    brief_limit: int = BRIEF_LIMIT,
    summarizer: Optional[Summarizer] = None,
    task_scope: Optional[str] = None,
    allow_cross_scope: bool = False,
) -> View:
    """
    Adaptive expansion: raise disclosure of existing segments, then append
    new segments by the default ranking, never exceeding ``budget``.
    Only artifacts visible from ``task_scope`` are considered.
    """
    pool = [a for a in artifact_pool if a.visible_from(task_scope, allow_cross_scope)]
    by_id = {a.id: a for a in pool}
    segments = list(view.segments)
    total = view.total_tokens

    for index, segment in enumerate(segments):
        artifact = by_id.get(segment.source_artifact_id)
        if artifact is None:
            continue
        for level in range(FULL, segment.disclosure_level, -1):
            text = disclose(artifact, level, brief_limit, summarizer)
            cost = estimate_tokens(text)
            if total - segment.token_cost + cost <= budget:
                segments[index] = ViewSegment(artifact.id, text, level, cost)
                total += cost - segment.token_cost
                break

    present = {s.source_artifact_id for s in segments}
    for artifact in rank_artifacts((a for a in pool if a.id not in present), intent):
        segment = _fit(artifact, FULL, budget - total, brief_limit, summarizer)
        if segment is None:
            continue
        segments.append(segment)
        total += segment.token_cost

    return View(
        segments=tuple(segments),
        intent_echo=view.intent_echo,
        total_tokens=total,
        budget=max(budget, view.budget),
        history_digest=view.history_digest,
    )


# --------------------------------- #
# curation
# --------------------------------- #

def curate(
    trajectory: Trajectory,
    intent: str,
    budget: int,
    scorer: Optional[StepScorer] = None,
    owner: Optional[str] = None,
) -> Trajectory:
    """
    Return a new trajectory holding the steps most relevant to ``intent``,
    in their original order, whose summed output tokens fit ``budget``.

    Steps are taken by descending score (ties by index) until the first one
    that does not fit.
    """
    if budget <= 0:
        raise InvalidBudget(f"Curation budget must be positive (got {budget})")
    score = scorer or overlap_score
    steps = trajectory.snapshot()
    ranked = sorted(range(len(steps)), key=lambda i: (-score(intent, steps[i].output), i))

    keep = []
    used = 0
    for index in ranked:
        cost = estimate_tokens(steps[index].output)
        if used + cost > budget:
            break
        keep.append(index)
        used += cost

    return Trajectory(
        owner=owner or trajectory.owner,
        steps=[steps[i] for i in sorted(keep)],
    )


def trajectory_tokens(trajectory: Trajectory) -> int:
    return sum(estimate_tokens(s.output) for s in trajectory.snapshot())


def branch_context(
    trajectory: Trajectory,
    n_branches: int,
    per_branch_intent: Sequence[str],
    branch_budget: Optional[int] = None,
) -> List[Trajectory]:
    """
    Fork ``n_branches`` clean sub-contexts, each curated for its own intent.
    Without ``branch_budget`` each branch gets an even share of the
    trajectory's tokens.

    Raises:
        InvalidBranchCount: n_branches < 1 or intents do not match.
    """
    if n_branches < 1:
        raise InvalidBranchCount("At least one branch is required")
    if len(per_branch_intent) != n_branches:
        raise InvalidBranchCount(
            f"{n_branches} branches need {n_branches} intents (got {len(per_branch_intent)})"
        )
    budget = branch_budget or max(1, trajectory_tokens(trajectory) // n_branches)
    return [
        curate(trajectory, intent, budget, owner=f"{trajectory.owner}/branch-{i}")
        for i, intent in enumerate(per_branch_intent)
    ]


def stitch_context(parent: Trajectory, branch: Trajectory, distilled_outcome_text: str) -> Trajectory:
    """
    Append ONE step carrying the distilled outcome of ``branch`` to ``parent``.

    Raises:
        EmptyDistillate: outcome is blank.
    """
    if not distilled_outcome_text or not distilled_outcome_text.strip():
        raise EmptyDistillate(f"Nothing to stitch back from {branch.owner}")
    intent = f"stitch {branch.owner}"
    parent.append(
        StepRecord(view=View.empty(intent), intent=intent, output=distilled_outcome_text),
        by=parent.owner,
    )
    return parent
