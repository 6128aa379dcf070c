"""
provenance.py - Append-only log of BindingEvents.

One event per line, tab-separated:

    event_id  kind  subject  object  evidence  parent_event  step  outcome

event_id increases monotonically. A parent must already be in the log, so
the parent graph is acyclic by construction; imported events that would
close a cycle are rejected.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional

from utils import InputError, InvariantError, escape_field, unescape_field

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    LENS_SELECT = "lens_select"
    ROUTE = "route"
    TOOL_CALL = "tool_call"
    INHERIT = "inherit"
    TIER_MIGRATION = "tier_migration"
    CONTRACT = "contract"
    FACADE = "facade"


class Outcome(str, Enum):
    PENDING = "pending"
    VALIDATED = "validated"
    FAILED = "failed"


class EventNotFound(InputError):
    pass


class CycleRejected(InvariantError):
    """Writing this event would make the parent graph cyclic."""
    pass


@dataclass(frozen=True)
class BindingEvent:
    event_id: int
    kind: EventKind
    subject: str
    object: str
    evidence: str
    parent_event: Optional[int] = None
    step: int = 0
    outcome: Outcome = Outcome.PENDING

    def to_line(self) -> str:
        parent = "" if self.parent_event is None else str(self.parent_event)
        fields = [
            str(self.event_id),
            self.kind.value,
            escape_field(self.subject),
            escape_field(self.object),
            escape_field(self.evidence),
            parent,
            str(self.step),
            self.outcome.value,
        ]
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "BindingEvent":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 8:
            raise InputError(f"Malformed provenance line: {line!r}")
        return cls(
            event_id=int(parts[0]),
            kind=EventKind(parts[1]),
            subject=unescape_field(parts[2]),
            object=unescape_field(parts[3]),
            evidence=unescape_field(parts[4]),
            parent_event=int(parts[5]) if parts[5] else None,
            step=int(parts[6]),
            outcome=Outcome(parts[7]),
        )


class ProvenanceLog:
    """
    Thread-safe event log, file-backed when ``path`` is given and purely
    in-memory otherwise (sandboxes, tests).
    """

    def __init__(self, path: Optional[Path] = None, start_id: int = 1):
        self.path = Path(path) if path is not None else None
        self._start_id = max(1, int(start_id))
        self._events: Dict[int, BindingEvent] = {}
        self._order: List[int] = []
        self._max_id = 0
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open("r", encoding="utf-8") as f:
            for raw in f:
                if not raw.strip():
                    continue
                event = BindingEvent.from_line(raw)
                # loading never rejects: a corrupt file must stay inspectable
                self._events[event.event_id] = event
                self._order.append(event.event_id)
                self._max_id = max(self._max_id, event.event_id)

    def __len__(self) -> int:
        return len(self._order)

    def __iter__(self) -> Iterator[BindingEvent]:
        return (self._events[i] for i in list(self._order))

    def __contains__(self, event_id: int) -> bool:
        return event_id in self._events

    @property
    def next_id(self) -> int:
        return max(self._max_id + 1, self._start_id)

    def get(self, event_id: int) -> BindingEvent:
        try:
            return self._events[event_id]
        except KeyError:
            raise EventNotFound(f"Unknown binding event: {event_id}")

    def events_for(self, object_id: str, kind: Optional[EventKind] = None) -> List[BindingEvent]:
        return [
            e for e in self
            if e.object == object_id and (kind is None or e.kind == kind)
        ]

    def append(
        self,
        kind: EventKind,
        subject: str,
        object: str,
        evidence: str,
        parent_event: Optional[int] = None,
        step: int = 0,
        outcome: Outcome = Outcome.PENDING,
    ) -> BindingEvent:
        with self._lock:
            if parent_event is not None and parent_event not in self._events:
                raise CycleRejected(f"Parent event {parent_event} does not exist")
            event = BindingEvent(
                event_id=self.next_id,
                kind=EventKind(kind),
                subject=subject,
                object=object,
                evidence=evidence,
                parent_event=parent_event,
                step=step,
                outcome=Outcome(outcome),
            )
            self._write(event)
            return event

    def import_event(self, event: BindingEvent) -> BindingEvent:
        """
        Write an event with an explicit id (log replication, replays).

        Raises:
            CycleRejected: duplicate id, missing parent, or a parent chain
                that leads back to this event.
        """
        with self._lock:
            if event.event_id in self._events:
                raise CycleRejected(f"Event id {event.event_id} already present")
            if event.event_id < self.next_id:
                raise CycleRejected(f"Event id {event.event_id} is not monotonic (next is {self.next_id})")
            seen = {event.event_id}
            cursor = event.parent_event
            while cursor is not None:
                if cursor in seen:
                    raise CycleRejected(f"Event {event.event_id} would close a provenance cycle")
                parent = self._events.get(cursor)
                if parent is None:
                    raise CycleRejected(f"Parent event {cursor} does not exist")
                seen.add(cursor)
                cursor = parent.parent_event
            self._write(event)
            return event

    def _write(self, event: BindingEvent) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8", newline="\n") as f:
                f.write(event.to_line() + "\n")
        self._events[event.event_id] = event
        self._order.append(event.event_id)
        self._max_id = max(self._max_id, event.event_id)
