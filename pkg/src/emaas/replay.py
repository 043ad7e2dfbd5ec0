"""Rebuild a scheduler from its persisted event log."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AppManifest, ExecutionContext, SchemaError
from .events import EventKind, EventLog, LogError, PersistedEvent
from .scheduler import Role, Scheduler, SchedulerConfig, SchedulerError

WEIGHT_TOLERANCE = 1e-12


@dataclass
class SnapshotCheck:
    seq: int
    label: str
    match: bool
    max_weight_diff: float


@dataclass
class ReplayResult:
    scheduler: Scheduler | None
    checks: list[SnapshotCheck] = field(default_factory=list)
    divergences: list[int] = field(default_factory=list)
    n_events: int = 0

    @property
    def verified(self) -> bool | None:
        """True/False once at least one post-init snapshot was compared, else None."""
        if not self.checks:
            return None
        return all(c.match for c in self.checks) and not self.divergences


def compare_models(scheduler: Scheduler, snapshot: dict) -> float:
    """Largest absolute weight difference between live models and a snapshot.

    Returns ``inf`` when the device sets or sample counts disagree.
    """
    worst = 0.0
    for kind, key in (("energy_models", "w"), ("reliability_models", "v")):
        live = getattr(scheduler.registry, kind)
        stored = snapshot.get(kind, {})
        if set(live) != set(stored):
            return float("inf")
        for device, doc in stored.items():
            model = live[device]
            if model.n != doc["n"]:
                return float("inf")
            theirs = np.asarray(doc[key], dtype=float)
            ours = model.w if key == "w" else model.v
            worst = max(worst, float(np.max(np.abs(ours - theirs))))
    return worst


def _dispatch(s: Scheduler, event: PersistedEvent) -> None:
    p = event.payload
    kind = event.kind
    if kind is EventKind.JOB_SUBMITTED:
        s.submit(AppManifest.from_dict(p["manifest"]), ExecutionContext.from_dict(p["context"]),
                 p["t"], request_token=p.get("request_token"), job_id=p["job_id"])
    elif kind is EventKind.PEER_EVENT:
        if p["event"] == "register":
            s.register_peer(p["peer_id"], Role(p["role"]), p["device_model"], p["t"])
        elif p["event"] == "heartbeat":
            s.heartbeat(p["peer_id"], p["t"])
        elif p["event"] == "offline":
            s.offline(p["peer_id"], p["t"])
        else:
            raise ValueError(f"unknown peer event {p['event']!r}")
    elif kind is EventKind.HARDWARE_RESULT:
        s.complete_hardware(p["job_id"], p["energy_j"], p["delta_t"], p["t"])
    elif kind is EventKind.MODEL_RESULT:
        s.complete_model(p["job_id"], p["t"], p.get("delta_t"))
    else:
        raise ValueError(f"{kind.value} is not an input event")


def replay(events: list[PersistedEvent], config: SchedulerConfig | None = None) -> ReplayResult:
    """Feed the input events of a log through a fresh scheduler.

    Decision events are regenerated, not read; each regenerated event is
    compared against the logged one at the same seq and mismatching seqs are
    reported as divergences. Snapshot events are re-taken and their model
    weights compared against the stored ones.
    """
    if not events:
        if config is None:
            return ReplayResult(None)
        return ReplayResult(Scheduler(config, EventLog(), log_config=False))

    first = events[0]
    if first.kind is EventKind.MODEL_SNAPSHOT_REF and "config" in first.payload:
        config = SchedulerConfig.from_dict(first.payload["config"])
    if config is None:
        raise LogError(1, "log does not start with a configuration snapshot")

    s = Scheduler(config, EventLog(), log_config=False)
    result = ReplayResult(s, n_events=len(events))
    for expected_seq, event in enumerate(events, start=1):
        if event.seq != expected_seq:
            raise LogError(expected_seq, f"expected seq {expected_seq}, found {event.seq}")
        if event.seq < s.log.next_seq:
            # already regenerated as a side effect of an earlier input
            if s.log.events[event.seq - 1].to_json() != event.to_json():
                result.divergences.append(event.seq)
            continue
        if event.seq > s.log.next_seq:
            raise LogError(s.log.next_seq, "logged event has no regenerated counterpart")
        if event.kind is EventKind.DECISION:
            raise LogError(event.seq, "decision event without a preceding input")
        if event.kind is EventKind.MODEL_SNAPSHOT_REF:
            s.clock = max(s.clock, event.payload.get("t", s.clock))
            s.snapshot(event.payload.get("label", ""))
            if event.seq > 1:
                diff = compare_models(s, event.payload)
                result.checks.append(SnapshotCheck(event.seq, event.payload.get("label", ""),
                                                   diff <= WEIGHT_TOLERANCE, diff))
            continue
        try:
            _dispatch(s, event)
        except (KeyError, TypeError, ValueError, SchemaError, SchedulerError) as exc:
            raise LogError(event.seq, f"corrupt payload: {exc}") from None
        if s.log.next_seq <= event.seq:
            raise LogError(event.seq, "input event was not accepted on replay")
        if s.log.events[event.seq - 1].to_json() != event.to_json():
            result.divergences.append(event.seq)
    return result
