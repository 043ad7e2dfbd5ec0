"""Append-only persisted event log (JSON lines, dense sequence numbers from 1)."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .core import SCHEMA_VERSION


class EventKind(str, Enum):
    JOB_SUBMITTED = "JobSubmitted"
    DECISION = "Decision"
    PEER_EVENT = "PeerEvent"
    HARDWARE_RESULT = "HardwareResult"
    MODEL_RESULT = "ModelResult"
    MODEL_SNAPSHOT_REF = "ModelSnapshotRef"


class LogError(ValueError):
    """A log is corrupt or has a gap. ``seq`` is the first offending sequence number."""

    def __init__(self, seq: int, message: str):
        super().__init__(f"seq {seq}: {message}")
        self.seq = seq


@dataclass(frozen=True)
class PersistedEvent:
    seq: int
    kind: EventKind
    payload: dict

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seq": self.seq, "kind": self.kind.value,
                "payload": self.payload}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "PersistedEvent":
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version!r}")
        return cls(int(doc["seq"]), EventKind(doc["kind"]), dict(doc["payload"]))


class EventLog:
    """In-memory log. Subclasses add durability."""

    def __init__(self):
        self.events: list[PersistedEvent] = []
        self._lock = threading.Lock()

    @property
    def next_seq(self) -> int:
        return len(self.events) + 1

    def append(self, kind: EventKind, payload: dict) -> PersistedEvent:
        with self._lock:
            event = PersistedEvent(self.next_seq, kind, payload)
            self._write(event)
            self.events.append(event)
            return event

    def _write(self, event: PersistedEvent) -> None:
        pass

    def __iter__(self) -> Iterator[PersistedEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def close(self) -> None:
        pass


class JsonlEventLog(EventLog):
    """Writes every event to a JSON-lines file before it becomes visible."""

    def __init__(self, path: str | Path, fsync: bool = True):
        super().__init__()
        self.path = Path(path)
        self.fsync = fsync
        if self.path.exists() and self.path.stat().st_size > 0:
            events, partial = read_log(self.path)
            if partial:
                raise LogError(len(events) + 1, "refusing to append to a truncated log")
            self.events = events
        self._fh = open(self.path, "a", encoding="utf-8")

    def _write(self, event: PersistedEvent) -> None:
        self._fh.write(event.to_json() + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


def write_log(events: Iterable[PersistedEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event.to_json() + "\n")


def parse_lines(lines: list[str]) -> tuple[list[PersistedEvent], bool]:
    """Parse and validate a log. Returns ``(events, partial)``.

    An unparseable final line without a trailing newline is treated as a
    truncated write: the prefix is returned and ``partial`` is True. Any
    other defect raises :class:`LogError` naming the first bad seq.
    """
    events: list[PersistedEvent] = []
    partial = False
    for i, raw in enumerate(lines):
        expected = len(events) + 1
        line = raw.strip()
        if not line:
            continue
        try:
            event = PersistedEvent.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            if i == len(lines) - 1 and not raw.endswith("\n"):
                partial = True
                break
            raise LogError(expected, f"corrupt event: {exc}") from None
        if event.seq != expected:
            raise LogError(expected, f"expected seq {expected}, found {event.seq}")
        events.append(event)
    return events, partial


def read_log(path: str | Path) -> tuple[list[PersistedEvent], bool]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    return parse_lines(lines)
