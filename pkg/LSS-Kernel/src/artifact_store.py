"""
artifact_store.py - File-backed, versioned artifact store.

Layout under the store root (``LSS_HOME``):

    <kind>/<id>.md           front matter between ``---`` lines, then the body
    <kind>/<id>.palimpsest   append-only history, length-prefixed UTF-8 fields
    provenance.log           BindingEvents (see provenance.py)
    .clock                   logical step + id sequence

A store created without a root keeps everything in memory; sandboxes and
most tests use that mode.
"""

from __future__ import annotations

import logging
import re
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from config import LssSettings, load_settings
from constants import (
    ARTIFACT_SUFFIX,
    CLOCK_FILE,
    FRONT_MATTER_DELIMITER,
    PALIMPSEST_SUFFIX,
    PROVENANCE_LOG,
    SYSTEM_KEYS,
)
from provenance import EventKind, Outcome, ProvenanceLog
from utils import InputError, InvariantError, atomic_write, normalize_whitespace

logger = logging.getLogger(__name__)

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class Kind(str, Enum):
    PROMPT = "prompt"
    SKILL = "skill"
    PLAN = "plan"
    INDEX = "index"
    TEAM = "team"
    FORK = "fork"
    CONTRACT = "contract"
    EVOLVE = "evolve"
    TASK = "task"
    TRACE = "trace"
    MEMORY = "memory"
    DOCUMENT = "document"


class Tier(str, Enum):
    HOT = "hot"
    WARM = "warm"
    COLD = "cold"


# --------------------------------- #
# errors
# --------------------------------- #

class NotFound(InputError):
    pass


class IdCollision(InputError):
    pass


class MalformedArtifact(InputError):
    pass


class RationaleRequired(InputError):
    pass


class VersionNotFound(InputError):
    pass


class NoOpMigration(InputError):
    pass


class ConcurrentEdit(InvariantError):
    pass


class CorruptArtifact(InvariantError):
    pass


# --------------------------------- #
# domain types
# --------------------------------- #

@dataclass(frozen=True)
class PalimpsestEntry:
    version: int
    rationale: str
    content_before: str
    content_after: str
    author: str
    step: int

    def encode(self) -> bytes:
        fields = [
            str(self.version),
            str(self.step),
            self.author,
            self.rationale,
            self.content_before,
            self.content_after,
        ]
        out = bytearray(b"E")
        for value in fields:
            raw = value.encode("utf-8")
            out += str(len(raw)).encode("ascii") + b":" + raw
        out += b"\n"
        return bytes(out)


def decode_palimpsest(data: bytes) -> List[PalimpsestEntry]:
    """Parse a sidecar file written by ``PalimpsestEntry.encode``."""
    entries: List[PalimpsestEntry] = []
    pos = 0
    while pos < len(data):
        if data[pos:pos + 1] != b"E":
            raise CorruptArtifact(f"Bad palimpsest record marker at byte {pos}")
        pos += 1
        fields: List[str] = []
        for _ in range(6):
            colon = data.index(b":", pos)
            length = int(data[pos:colon])
            start = colon + 1
            fields.append(data[start:start + length].decode("utf-8"))
            pos = start + length
        if data[pos:pos + 1] != b"\n":
            raise CorruptArtifact(f"Bad palimpsest record terminator at byte {pos}")
        pos += 1
        entries.append(PalimpsestEntry(
            version=int(fields[0]),
            step=int(fields[1]),
            author=fields[2],
            rationale=fields[3],
            content_before=fields[4],
            content_after=fields[5],
        ))
    return entries


@dataclass(frozen=True)
class Artifact:
    id: str
    kind: Kind
    content: str
    front_matter: Mapping[str, str]
    tier: Tier = Tier.HOT
    use_count: int = 0
    created_step: int = 0
    last_used_step: int = 0
    history: Tuple[PalimpsestEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "front_matter", MappingProxyType(dict(self.front_matter)))

    @property
    def name(self) -> str:
        return self.front_matter.get("name", self.id)

    @property
    def version(self) -> int:
        return len(self.history)

    @property
    def task_scope(self) -> Optional[str]:
        return self.front_matter.get("task_scope") or None

    def visible_from(self, task_scope: Optional[str], allow_cross_scope: bool = False) -> bool:
        """Untagged artifacts are global; tagged ones only bind inside their scope."""
        if allow_cross_scope or task_scope is None or self.task_scope is None:
            return True
        return self.task_scope == task_scope

    def metadata_line(self) -> str:
        return f"{self.name} [{self.kind.value}]"

    def to_markdown(self) -> str:
        lines = [FRONT_MATTER_DELIMITER]
        for key, value in self.front_matter.items():
            lines.append(f"{key}: {value}")
        lines.append(f"id: {self.id}")
        lines.append(f"tier: {self.tier.value}")
        lines.append(f"use_count: {self.use_count}")
        lines.append(f"created_step: {self.created_step}")
        lines.append(f"last_used_step: {self.last_used_step}")
        lines.append(FRONT_MATTER_DELIMITER)
        return "\n".join(lines) + "\n" + self.content


def parse_front_matter(text: str) -> Tuple[Dict[str, str], str]:
    """Split ``---`` delimited front matter from the body (body kept byte-exact)."""
    opener = FRONT_MATTER_DELIMITER + "\n"
    if not text.startswith(opener):
        raise MalformedArtifact("Artifact file does not start with front matter")
    cursor = len(opener)
    meta: Dict[str, str] = {}
    while True:
        end = text.find("\n", cursor)
        if end == -1:
            raise MalformedArtifact("Unterminated front matter")
        line = text[cursor:end]
        cursor = end + 1
        if line == FRONT_MATTER_DELIMITER:
            break
        key, sep, value = line.partition(":")
        if not sep or not key.strip():
            raise MalformedArtifact(f"Bad front matter line: {line!r}")
        meta[key.strip()] = value[1:] if value.startswith(" ") else value
    return meta, text[cursor:]


def _validate_front_matter(front_matter: Mapping[str, str]) -> Dict[str, str]:
    clean: Dict[str, str] = {}
    for key, value in front_matter.items():
        key = str(key)
        value = str(value)
        if not key.strip() or ":" in key or "\n" in key:
            raise MalformedArtifact(f"Invalid front matter key: {key!r}")
        if "\n" in value or "\r" in value:
            raise MalformedArtifact(f"Front matter value for {key!r} spans lines")
        clean[key.strip()] = value
    return clean


@dataclass(frozen=True)
class TierMigrationRecord:
    artifact_id: str
    from_tier: Tier
    to_tier: Tier
    reason: str
    step: int
    event_id: int


@dataclass(frozen=True)
class StoreSnapshot:
    """Immutable point-in-time view of a store; artifacts are shared, never copied."""
    artifacts: Mapping[str, Artifact]
    step: int
    sequence: int
    next_event_id: int

    def get(self, artifact_id: str) -> Optional[Artifact]:
        return self.artifacts.get(artifact_id)


@dataclass
class MaintenanceReport:
    duplicate_groups: List[List[str]] = field(default_factory=list)
    stale: List[str] = field(default_factory=list)
    conflicts: List[Tuple[str, str, List[str]]] = field(default_factory=list)
    retire_candidates: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (
            self.duplicate_groups or self.stale or self.conflicts
            or self.retire_candidates or self.warnings
        )


# --------------------------------- #
# store
# --------------------------------- #

class ArtifactStore:
    """
    Owns all persistent artifacts.

    Reads are lock-free on an immutable artifact map entry; every mutation
    replaces the Artifact object under ``_lock`` so snapshots stay valid.
    """

    def __init__(
        self,
        root: Optional[Path] = None,
        settings: Optional[LssSettings] = None,
        log: Optional[ProvenanceLog] = None,
    ):
        self.root = Path(root) if root is not None else None
        self.settings = settings or load_settings()
        self._artifacts: Dict[str, Artifact] = {}
        self._lock = threading.RLock()
        self._editors: Dict[str, Tuple[int, int]] = {}
        self._step = 0
        self._sequence = 0
        self.base: Optional[StoreSnapshot] = None

        if log is not None:
            self.log = log
        elif self.root is not None:
            self.log = ProvenanceLog(self.root / PROVENANCE_LOG)
        else:
            self.log = ProvenanceLog()

        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    @classmethod
    def open(cls, settings: Optional[LssSettings] = None) -> "ArtifactStore":
        settings = settings or load_settings()
        return cls(root=settings.home, settings=settings)

    @classmethod
    def from_snapshot(cls, snapshot: StoreSnapshot, settings: Optional[LssSettings] = None) -> "ArtifactStore":
        """In-memory store whose artifacts start as the snapshot's (copy-on-write)."""
        store = cls(root=None, settings=settings, log=ProvenanceLog(start_id=snapshot.next_event_id))
        store._artifacts = dict(snapshot.artifacts)
        store._step = snapshot.step
        store._sequence = snapshot.sequence
        store.base = snapshot
        return store

    # ---- loading / persistence ---------------------------------------

    def _load(self) -> None:
        clock = self.root / CLOCK_FILE
        if clock.exists():
            parts = clock.read_text(encoding="utf-8").split()
            self._step, self._sequence = int(parts[0]), int(parts[1])

        for path in sorted(self.root.glob(f"*/*{ARTIFACT_SUFFIX}")):
            artifact = self._read_file(path)
            self._artifacts[artifact.id] = artifact
        logger.info("Loaded %d artifacts from %s", len(self._artifacts), self.root)

    def _read_file(self, path: Path) -> Artifact:
        meta, body = parse_front_matter(path.read_bytes().decode("utf-8"))
        system = {k: meta.pop(k) for k in SYSTEM_KEYS if k in meta}
        artifact_id = system.get("id", path.stem)
        try:
            kind = Kind(meta.get("kind", path.parent.name))
        except ValueError:
            raise MalformedArtifact(f"{path}: unknown kind {meta.get('kind')!r}")

        sidecar = path.with_suffix(PALIMPSEST_SUFFIX)
        history = tuple(decode_palimpsest(sidecar.read_bytes())) if sidecar.exists() else ()
        if history and history[-1].content_after != body:
            raise CorruptArtifact(f"{artifact_id}: body differs from latest palimpsest entry")

        return Artifact(
            id=artifact_id,
            kind=kind,
            content=body,
            front_matter=meta,
            tier=Tier(system.get("tier", Tier.HOT.value)),
            use_count=int(system.get("use_count", 0)),
            created_step=int(system.get("created_step", 0)),
            last_used_step=int(system.get("last_used_step", 0)),
            history=history,
        )

    def _path_for(self, artifact: Artifact) -> Path:
        return self.root / artifact.kind.value / f"{artifact.id}{ARTIFACT_SUFFIX}"

    def _persist(self, artifact: Artifact, entry: Optional[PalimpsestEntry] = None) -> None:
        self._artifacts[artifact.id] = artifact
        if self.root is None:
            return
        path = self._path_for(artifact)
        if entry is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.with_suffix(PALIMPSEST_SUFFIX).open("ab") as f:
                f.write(entry.encode())
        atomic_write(path, artifact.to_markdown())
        atomic_write(self.root / CLOCK_FILE, f"{self._step} {self._sequence}\n")

    # ---- basic access ---------------------------------------------------

    @property
    def step(self) -> int:
        return self._step

    def advance(self, steps: int = 1) -> int:
        """Move the logical clock forward without touching any artifact."""
        with self._lock:
            self._step += max(0, int(steps))
            if self.root is not None:
                atomic_write(self.root / CLOCK_FILE, f"{self._step} {self._sequence}\n")
            return self._step

    def _tick(self) -> int:
        self._step += 1
        return self._step

    def __contains__(self, artifact_id: str) -> bool:
        return artifact_id in self._artifacts

    def __len__(self) -> int:
        return len(self._artifacts)

    def __iter__(self) -> Iterator[Artifact]:
        return iter(self.list_artifacts())

    def list_artifacts(self, kind: Optional[Kind] = None, tier: Optional[Tier] = None) -> List[Artifact]:
        items = [
            a for a in self._artifacts.values()
            if (kind is None or a.kind == Kind(kind)) and (tier is None or a.tier == Tier(tier))
        ]
        return sorted(items, key=lambda a: a.id)

    def get_artifact(self, artifact_id: str) -> Artifact:
        artifact = self._artifacts.get(artifact_id)
        if artifact is None:
            raise NotFound(f"Unknown artifact: {artifact_id}")
        return artifact

    def history(self, artifact_id: str) -> Tuple[PalimpsestEntry, ...]:
        return self.get_artifact(artifact_id).history

    def read_version(self, artifact_id: str, version: int) -> str:
        history = self.history(artifact_id)
        if not 1 <= version <= len(history):
            raise VersionNotFound(f"{artifact_id} has no version {version} (current {len(history)})")
        return history[version - 1].content_after

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            return StoreSnapshot(
                artifacts=MappingProxyType(dict(self._artifacts)),
                step=self._step,
                sequence=self._sequence,
                next_event_id=self.log.next_id,
            )

    def overlay_ids(self) -> List[str]:
        """Ids whose artifact differs from the base snapshot (sandbox stores)."""
        if self.base is None:
            return sorted(self._artifacts)
        return sorted(
            aid for aid, a in self._artifacts.items()
            if self.base.artifacts.get(aid) is not a
        )

    # ---- mutations ------------------------------------------------------

    def _next_id(self, kind: Kind) -> str:
        while True:
            self._sequence += 1
            candidate = f"{kind.value}-{self._sequence:04d}"
            if candidate not in self._artifacts:
                return candidate

    def put_artifact(
        self,
        kind: Kind,
        content: str,
        front_matter: Optional[Mapping[str, str]] = None,
        artifact_id: Optional[str] = None,
        author: str = "system",
    ) -> Artifact:
        """
        Create a new artifact in the hot tier with a single 'created' entry.

        Raises:
            IdCollision: explicit id already present.
            MalformedArtifact: bad id, kind mismatch or bad front matter.
        """
        kind = Kind(kind)
        if not isinstance(content, str):
            raise MalformedArtifact("Artifact content must be text")
        meta = _validate_front_matter(front_matter or {})
        explicit_id = artifact_id or meta.pop("id", None)
        for key in SYSTEM_KEYS:
            meta.pop(key, None)
        if meta.get("kind", kind.value) != kind.value:
            raise MalformedArtifact(f"front matter kind {meta['kind']!r} does not match {kind.value!r}")

        with self._lock:
            if explicit_id is not None:
                if not _ID_RE.match(explicit_id):
                    raise MalformedArtifact(f"Invalid artifact id: {explicit_id!r}")
                if explicit_id in self._artifacts:
                    raise IdCollision(f"Artifact id already exists: {explicit_id}")
                new_id = explicit_id
            else:
                new_id = self._next_id(kind)

            step = self._tick()
            ordered = {"kind": kind.value, "name": meta.pop("name", new_id)}
            meta.pop("kind", None)
            ordered.update(meta)

            entry = PalimpsestEntry(
                version=1,
                rationale="created",
                content_before="",
                content_after=content,
                author=author,
                step=step,
            )
            artifact = Artifact(
                id=new_id,
                kind=kind,
                content=content,
                front_matter=ordered,
                created_step=step,
                last_used_step=step,
                history=(entry,),
            )
            self._persist(artifact, entry)
            logger.debug("Created %s (%s)", new_id, kind.value)
            return artifact

    @contextmanager
    def edit_session(self, artifact_id: str) -> Iterator[Artifact]:
        """
        Claim exclusive edit rights on one artifact for the current thread.

        Raises:
            ConcurrentEdit: another thread holds the session.
        """
        me = threading.get_ident()
        with self._lock:
            current = self.get_artifact(artifact_id)
            owner = self._editors.get(artifact_id)
            if owner is not None and owner[0] != me:
                raise ConcurrentEdit(f"{artifact_id} is being edited by another writer")
            self._editors[artifact_id] = (me, (owner[1] if owner else 0) + 1)
        try:
            yield current
        finally:
            with self._lock:
                who, depth = self._editors[artifact_id]
                if depth <= 1:
                    del self._editors[artifact_id]
                else:
                    self._editors[artifact_id] = (who, depth - 1)

    def revise_artifact(
        self,
        artifact_id: str,
        new_content: str,
        rationale: str,
        author: str = "system",
        expected_version: Optional[int] = None,
        front_matter: Optional[Mapping[str, str]] = None,
    ) -> PalimpsestEntry:
        """
        Append version n+1 with ``new_content`` as the current body.

        Raises:
            RationaleRequired: empty rationale.
            ConcurrentEdit: another writer holds the artifact, or
                ``expected_version`` no longer matches.
        """
        if not rationale or not rationale.strip():
            raise RationaleRequired(f"Revision of {artifact_id} needs a rationale")
        if not isinstance(new_content, str):
            raise MalformedArtifact("Artifact content must be text")
        updates = _validate_front_matter(front_matter or {})

        with self.edit_session(artifact_id):
            with self._lock:
                current = self.get_artifact(artifact_id)
                if expected_version is not None and current.version != expected_version:
                    raise ConcurrentEdit(
                        f"{artifact_id} moved to v{current.version} (expected v{expected_version})"
                    )
                step = self._tick()
                entry = PalimpsestEntry(
                    version=current.version + 1,
                    rationale=rationale,
                    content_before=current.content,
                    content_after=new_content,
                    author=author,
                    step=step,
                )
                meta = dict(current.front_matter)
                meta.update({k: v for k, v in updates.items() if k not in SYSTEM_KEYS and k != "kind"})
                revised = replace(
                    current,
                    content=new_content,
                    front_matter=meta,
                    history=current.history + (entry,),
                )
                self._persist(revised, entry)
                return entry

    def rollback_artifact(self, artifact_id: str, target_version: int, author: str = "system") -> Artifact:
        """
        Restore the body of ``target_version`` as a NEW entry; nothing is truncated.

        Raises:
            VersionNotFound: target outside 1..current.
        """
        content = self.read_version(artifact_id, target_version)
        self.revise_artifact(
            artifact_id,
            content,
            rationale=f"rollback to v{target_version}",
            author=author,
        )
        return self.get_artifact(artifact_id)

    def update_front_matter(
        self,
        artifact_id: str,
        updates: Mapping[str, str],
        remove: Sequence[str] = (),
    ) -> Artifact:
        """Advisory metadata change; no palimpsest entry, clock untouched."""
        updates = _validate_front_matter(updates)
        with self._lock:
            current = self.get_artifact(artifact_id)
            meta = dict(current.front_matter)
            for key in remove:
                if key not in ("kind", "name"):
                    meta.pop(key, None)
            meta.update({k: v for k, v in updates.items() if k not in SYSTEM_KEYS and k != "kind"})
            changed = replace(current, front_matter=meta)
            self._persist(changed)
            return changed

    def migrate_tier(
        self,
        artifact_id: str,
        new_tier: Tier,
        reason: str,
        subject: str = "maintainer",
    ) -> TierMigrationRecord:
        """
        Move an artifact to another tier and log a tier_migration event.

        Raises:
            NoOpMigration: artifact already in ``new_tier``.
        """
        new_tier = Tier(new_tier)
        with self._lock:
            current = self.get_artifact(artifact_id)
            if current.tier == new_tier:
                raise NoOpMigration(f"{artifact_id} is already {new_tier.value}")
            step = self._tick()
            event = self.log.append(
                kind=EventKind.TIER_MIGRATION,
                subject=subject,
                object=artifact_id,
                evidence=f"{current.tier.value}->{new_tier.value}: {reason}",
                step=step,
                outcome=Outcome.PENDING,
            )
            self._persist(replace(current, tier=new_tier))
            logger.info("Tier migration %s: %s -> %s (%s)", artifact_id, current.tier.value, new_tier.value, reason)
            return TierMigrationRecord(
                artifact_id=artifact_id,
                from_tier=current.tier,
                to_tier=new_tier,
                reason=reason,
                step=step,
                event_id=event.event_id,
            )

    def migration_records(self, artifact_id: str) -> List[TierMigrationRecord]:
        records = []
        for event in self.log.events_for(artifact_id, EventKind.TIER_MIGRATION):
            move, _, reason = event.evidence.partition(": ")
            source, _, target = move.partition("->")
            records.append(TierMigrationRecord(
                artifact_id=artifact_id,
                from_tier=Tier(source),
                to_tier=Tier(target),
                reason=reason,
                step=event.step,
                event_id=event.event_id,
            ))
        return records

    def record_use(
        self,
        artifact_id: str,
        validated: bool,
        subject: str = "agent",
        event_kind: EventKind = EventKind.TOOL_CALL,
        parent_event: Optional[int] = None,
        evidence: str = "",
    ) -> Artifact:
        """
        Hebbian bookkeeping for one binding of this artifact.

        A validated use bumps use_count; reaching the promotion threshold
        moves a hot artifact to warm. Any use pulls a cold artifact back to hot.
        """
        with self._lock:
            current = self.get_artifact(artifact_id)
            step = self._tick()
            self.log.append(
                kind=event_kind,
                subject=subject,
                object=artifact_id,
                evidence=evidence or ("validated use" if validated else "unvalidated use"),
                parent_event=parent_event,
                step=step,
                outcome=Outcome.VALIDATED if validated else Outcome.FAILED,
            )
            used = replace(
                current,
                use_count=current.use_count + (1 if validated else 0),
                last_used_step=step,
            )
            self._persist(used)

            if used.tier == Tier.COLD:
                self.migrate_tier(artifact_id, Tier.HOT, "reused while cold", subject=subject)
            threshold = self.settings.promotion_threshold
            if validated and self.get_artifact(artifact_id).tier == Tier.HOT and used.use_count >= threshold:
                self.migrate_tier(
                    artifact_id,
                    Tier.WARM,
                    f"hebbian promotion after {used.use_count} validated uses",
                    subject=subject,
                )
            return self.get_artifact(artifact_id)

    def validated_use_count(self, artifact_id: str) -> int:
        return sum(
            1 for e in self.log.events_for(artifact_id)
            if e.outcome == Outcome.VALIDATED
        )


# --------------------------------- #
# maintenance
# --------------------------------- #

def _index_pointers(body: str) -> List[Tuple[str, str]]:
    pairs = []
    for line in body.splitlines():
        head = line.split("|", 1)[0]
        if "->" not in head:
            continue
        focal, _, neighbor = head.partition("->")
        pairs.append((focal.strip(), neighbor.strip()))
    return pairs


def run_maintenance(
    store: ArtifactStore,
    staleness_window: Optional[int] = None,
    mark: bool = True,
    apply_retirement: bool = False,
) -> MaintenanceReport:
    """
    Scan for duplicates, stale items, name conflicts, retire candidates and
    dangling index pointers. Marking is advisory; nothing is deleted.
    """
    window = staleness_window if staleness_window is not None else store.settings.staleness_window
    report = MaintenanceReport()
    artifacts = store.list_artifacts()

    by_body: Dict[Tuple[Kind, str], List[str]] = {}
    by_name: Dict[Tuple[Kind, str], List[str]] = {}
    for a in artifacts:
        by_body.setdefault((a.kind, normalize_whitespace(a.content)), []).append(a.id)
        by_name.setdefault((a.kind, a.name), []).append(a.id)

    report.duplicate_groups = sorted(ids for ids in by_body.values() if len(ids) > 1)
    report.conflicts = sorted(
        (kind.value, name, ids) for (kind, name), ids in by_name.items() if len(ids) > 1
    )

    for a in artifacts:
        if store.step - a.last_used_step > window:
            report.stale.append(a.id)
            if a.tier != Tier.COLD and a.use_count == 0:
                report.retire_candidates.append(a.id)
        if a.kind == Kind.INDEX:
            for focal, neighbor in _index_pointers(a.content):
                for ref in (focal, neighbor):
                    if ref and ref not in store:
                        report.warnings.append(f"{a.id}: index points at missing artifact {ref}")

    if mark:
        for group in report.duplicate_groups:
            canonical = group[0]
            for other in group[1:]:
                if store.get_artifact(other).front_matter.get("duplicate_of") != canonical:
                    store.update_front_matter(other, {"duplicate_of": canonical})
        for aid in report.stale:
            if store.get_artifact(aid).front_matter.get("stale") != "true":
                store.update_front_matter(aid, {"stale": "true"})

    if apply_retirement:
        for aid in report.retire_candidates:
            store.migrate_tier(aid, Tier.COLD, "rarely bound and stale")

    if not report.is_empty():
        logger.warning(
            "Maintenance: %d duplicate groups, %d stale, %d conflicts, %d retire candidates, %d warnings",
            len(report.duplicate_groups), len(report.stale), len(report.conflicts),
            len(report.retire_candidates), len(report.warnings),
        )
    return report
