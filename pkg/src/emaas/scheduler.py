"""Peer registry, job lifecycle and hardware/model/wait routing.

The :class:`Scheduler` is a single-writer state machine. Every accepted input
(submission, peer event, result) is appended to its event log before any
state changes, followed by the routing decisions it caused, so the log alone
is enough to rebuild the scheduler.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .core import (
    DEFAULT_LAMBDA,
    DEFAULT_N_MIN,
    DEFAULT_P0,
    DEFAULT_THETA,
    ApiVocabulary,
    AppManifest,
    EnergyModel,
    ExecutionContext,
    MeasurementRecord,
    ReliabilityModel,
    Source,
    estimate_energy,
    extract_features,
    feature_dim,
    is_reliable,
    power_error,
    predict_abs_error,
    update_energy_model,
    update_reliability_model,
)
from .events import EventKind, EventLog

NO_CAPACITY = "no capacity for device model"
PEER_LOST = "peer lost"
WAIT_TIMEOUT = "wait timeout"
INVALID_MEASUREMENT = "invalid measurement"
NO_MODEL = "routing invariant violated: no energy model for device"


class SchedulerError(RuntimeError):
    """An input was rejected. Rejected inputs are never logged."""


class Role(str, Enum):
    PROVIDER = "provider"
    SUPER_PROVIDER = "super_provider"


class PeerState(str, Enum):
    IDLE = "idle"
    BUSY = "busy"
    OFFLINE = "offline"


class JobState(str, Enum):
    SUBMITTED = "submitted"
    ASSIGNED_HARDWARE = "assigned_hardware"
    ASSIGNED_MODEL = "assigned_model"
    WAITING = "waiting"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


LEGAL_TRANSITIONS: dict[JobState, frozenset[JobState]] = {
    JobState.SUBMITTED: frozenset(
        {JobState.ASSIGNED_HARDWARE, JobState.ASSIGNED_MODEL, JobState.WAITING, JobState.FAILED}
    ),
    JobState.WAITING: frozenset(
        {JobState.ASSIGNED_HARDWARE, JobState.ASSIGNED_MODEL, JobState.FAILED}
    ),
    JobState.ASSIGNED_HARDWARE: frozenset({JobState.RUNNING}),
    JobState.ASSIGNED_MODEL: frozenset({JobState.RUNNING}),
    JobState.RUNNING: frozenset({JobState.COMPLETED, JobState.FAILED}),
    JobState.COMPLETED: frozenset(),
    JobState.FAILED: frozenset(),
}


class Action(str, Enum):
    ASSIGN_HARDWARE = "assign_hardware"
    ASSIGN_MODEL = "assign_model"
    WAIT = "wait"
    FAIL = "fail"


@dataclass(frozen=True)
class Decision:
    action: Action
    peer_id: str | None = None
    predicted_abs_error: float | None = None
    reliable: bool = False
    reason: str | None = None


@dataclass
class PeerRecord:
    peer_id: str
    role: Role
    device_model: str
    state: PeerState = PeerState.IDLE
    current_job: str | None = None
    last_assigned: int = -1

    def to_dict(self) -> dict:
        return {
            "peer_id": self.peer_id,
            "role": self.role.value,
            "device_model": self.device_model,
            "state": self.state.value,
            "current_job": self.current_job,
        }


@dataclass
class Job:
    job_id: str
    manifest: AppManifest
    context: ExecutionContext
    submitted_at: float
    features: np.ndarray
    request_token: str | None = None
    state: JobState = JobState.SUBMITTED
    peer_id: str | None = None
    route: Source | None = None
    record: MeasurementRecord | None = None
    reason: str | None = None
    waiting_since: float | None = None
    # a job lost with its peer is failed and re-submitted under a linked id
    resubmission_of: str | None = None
    resubmitted_as: str | None = None
    history: list[tuple[JobState, int]] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)

    @property
    def device_model(self) -> str:
        return self.context.device_model

    @property
    def terminal(self) -> bool:
        return self.state in (JobState.COMPLETED, JobState.FAILED)

    def transition(self, new: JobState, seq: int) -> None:
        if new not in LEGAL_TRANSITIONS[self.state]:
            raise SchedulerError(f"illegal transition {self.state.value} -> {new.value} for {self.job_id}")
        self.state = new
        self.history.append((new, seq))


@dataclass
class SchedulerConfig:
    vocab: ApiVocabulary
    cx_names: tuple[str, ...] = ()
    theta: float = DEFAULT_THETA
    n_min: int = DEFAULT_N_MIN
    lam: float = DEFAULT_LAMBDA
    p0: float = DEFAULT_P0
    max_wait: float | None = None

    @property
    def dim(self) -> int:
        return feature_dim(self.vocab, self.cx_names)

    def to_dict(self) -> dict:
        return {
            "vocab": list(self.vocab.entries),
            "cx_names": list(self.cx_names),
            "theta": self.theta,
            "n_min": self.n_min,
            "lambda": self.lam,
            "p0": self.p0,
            "max_wait": self.max_wait,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SchedulerConfig":
        return cls(
            vocab=ApiVocabulary(tuple(doc["vocab"])),
            cx_names=tuple(doc.get("cx_names", ())),
            theta=float(doc.get("theta", DEFAULT_THETA)),
            n_min=int(doc.get("n_min", DEFAULT_N_MIN)),
            lam=float(doc.get("lambda", DEFAULT_LAMBDA)),
            p0=float(doc.get("p0", DEFAULT_P0)),
            max_wait=doc.get("max_wait"),
        )


@dataclass
class Registry:
    peers: dict[str, PeerRecord] = field(default_factory=dict)
    wait_queues: dict[str, deque[str]] = field(default_factory=dict)
    energy_models: dict[str, EnergyModel] = field(default_factory=dict)
    reliability_models: dict[str, ReliabilityModel] = field(default_factory=dict)

    def peers_for(self, device_model: str) -> list[PeerRecord]:
        return [p for p in self.peers.values() if p.device_model == device_model]

    def queue(self, device_model: str) -> deque[str]:
        return self.wait_queues.setdefault(device_model, deque())


def _least_recently_used(peers: list[PeerRecord]) -> PeerRecord:
    return min(peers, key=lambda p: (p.last_assigned, p.peer_id))


def route(job: Job, reg: Registry) -> Decision:
    """Decide hardware, model or wait for a Submitted or Waiting job.

    An idle matching super-provider always wins. Otherwise a provider is used
    only when the reliability gate passes for this job's features.
    """
    if job.state not in (JobState.SUBMITTED, JobState.WAITING):
        raise SchedulerError(f"cannot route job in state {job.state.value}")
    device = job.device_model
    peers = reg.peers_for(device)
    rc = reg.reliability_models.get(device)
    predicted = predict_abs_error(rc, job.features) if rc is not None else None
    reliable = rc is not None and is_reliable(rc, job.features)
    if not peers:
        return Decision(Action.FAIL, None, predicted, reliable, NO_CAPACITY)

    idle_super = [p for p in peers if p.role is Role.SUPER_PROVIDER and p.state is PeerState.IDLE]
    if idle_super:
        return Decision(Action.ASSIGN_HARDWARE, _least_recently_used(idle_super).peer_id,
                        predicted, reliable)
    if reliable:
        idle = [p for p in peers if p.role is Role.PROVIDER and p.state is PeerState.IDLE]
        if idle:
            return Decision(Action.ASSIGN_MODEL, _least_recently_used(idle).peer_id,
                            predicted, reliable)
    elif not any(p.role is Role.SUPER_PROVIDER for p in peers):
        return Decision(Action.FAIL, None, predicted, reliable, NO_CAPACITY)
    return Decision(Action.WAIT, None, predicted, reliable)


class Scheduler:
    def __init__(self, config: SchedulerConfig, log: EventLog | None = None, *,
                 log_config: bool = True):
        self.config = config
        self.log = log if log is not None else EventLog()
        self.registry = Registry()
        self.jobs: dict[str, Job] = {}
        self.tokens: dict[str, str] = {}
        self.clock: float = 0.0
        self._job_counter = 0
        if log_config and len(self.log) == 0:
            self.snapshot("init")

    # ---- helpers -------------------------------------------------------

    def _log(self, kind: EventKind, payload: dict) -> int:
        return self.log.append(kind, payload).seq

    def _tick(self, now: float) -> None:
        if now < self.clock:
            raise SchedulerError(f"time went backwards: {now} < {self.clock}")
        self.clock = now

    def ensure_models(self, device_model: str) -> None:
        reg, cfg = self.registry, self.config
        if device_model not in reg.energy_models:
            reg.energy_models[device_model] = EnergyModel.fresh(
                device_model, cfg.dim, lam=cfg.lam, p0=cfg.p0)
            reg.reliability_models[device_model] = ReliabilityModel.fresh(
                device_model, cfg.dim, theta=cfg.theta, n_min=cfg.n_min, lam=cfg.lam, p0=cfg.p0)

    def features(self, manifest: AppManifest) -> np.ndarray:
        return extract_features(manifest, self.config.vocab, self.config.cx_names)

    def queue_position(self, job_id: str) -> int | None:
        job = self.jobs[job_id]
        if job.state is not JobState.WAITING:
            return None
        return list(self.registry.queue(job.device_model)).index(job_id)

    def _apply(self, job: Job, decision: Decision) -> None:
        payload: dict[str, Any] = {
            "job_id": job.job_id,
            "action": decision.action.value,
            "peer_id": decision.peer_id,
            "device_model": job.device_model,
            "predicted_abs_error": decision.predicted_abs_error,
            "reliable": decision.reliable,
            "theta": self.config.theta,
            "n_r": self._n_r(job.device_model),
            "reason": decision.reason,
            "t": self.clock,
        }
        dseq = self._log(EventKind.DECISION, payload)
        job.decisions.append({"seq": dseq, **payload})

        if decision.action in (Action.ASSIGN_HARDWARE, Action.ASSIGN_MODEL):
            peer = self.registry.peers[decision.peer_id]
            hw = decision.action is Action.ASSIGN_HARDWARE
            job.transition(JobState.ASSIGNED_HARDWARE if hw else JobState.ASSIGNED_MODEL, dseq)
            job.transition(JobState.RUNNING, dseq)
            job.peer_id = peer.peer_id
            job.route = Source.HARDWARE if hw else Source.MODEL
            job.waiting_since = None
            peer.state = PeerState.BUSY
            peer.current_job = job.job_id
            peer.last_assigned = dseq
        elif decision.action is Action.WAIT:
            if job.state is not JobState.WAITING:
                job.transition(JobState.WAITING, dseq)
                job.waiting_since = self.clock
                job.peer_id = None
                job.route = None
                if decision.reason == PEER_LOST:
                    self.registry.queue(job.device_model).appendleft(job.job_id)
                else:
                    self.registry.queue(job.device_model).append(job.job_id)
        else:
            if job.state is JobState.WAITING:
                self.registry.queue(job.device_model).remove(job.job_id)
            job.transition(JobState.FAILED, dseq)
            job.reason = decision.reason

    def _n_r(self, device_model: str) -> int:
        rc = self.registry.reliability_models.get(device_model)
        return rc.n if rc is not None else 0

    def _drain(self, device_model: str) -> None:
        q = self.registry.queue(device_model)
        while q:
            job = self.jobs[q[0]]
            decision = route(job, self.registry)
            if decision.action is Action.WAIT:
                return
            q.popleft()
            self._apply(job, decision)

    def _expire(self) -> None:
        if self.config.max_wait is None:
            return
        expired = [
            job for q in self.registry.wait_queues.values() for job in map(self.jobs.get, q)
            if self.clock - job.waiting_since > self.config.max_wait
        ]
        for job in sorted(expired, key=lambda j: j.job_id):
            rc = self.registry.reliability_models.get(job.device_model)
            pred = predict_abs_error(rc, job.features) if rc is not None else None
            self._apply(job, Decision(Action.FAIL, None, pred, False, WAIT_TIMEOUT))

    def _free(self, job: Job) -> None:
        peer = self.registry.peers.get(job.peer_id)
        if peer is not None and peer.current_job == job.job_id:
            peer.state = PeerState.IDLE
            peer.current_job = None

    def _running(self, job_id: str, hardware: bool) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise SchedulerError(f"unknown job {job_id}")
        wanted = Source.HARDWARE if hardware else Source.MODEL
        if job.state is not JobState.RUNNING or job.route is not wanted:
            raise SchedulerError(f"job {job_id} is not running on a {'hardware' if hardware else 'model'} route")
        return job

    # ---- inputs --------------------------------------------------------

    def submit(self, manifest: AppManifest, context: ExecutionContext, now: float,
               request_token: str | None = None, job_id: str | None = None) -> Job:
        if request_token is not None and request_token in self.tokens:
            return self.jobs[self.tokens[request_token]]
        self._tick(now)
        if job_id is None:
            job_id = f"job-{self._job_counter + 1:06d}"
        if job_id in self.jobs:
            raise SchedulerError(f"duplicate job id {job_id}")
        self._job_counter += 1
        seq = self._log(EventKind.JOB_SUBMITTED, {
            "job_id": job_id,
            "request_token": request_token,
            "manifest": manifest.to_dict(),
            "context": context.to_dict(),
            "t": now,
        })
        self._expire()
        job = Job(job_id, manifest, context, now, self.features(manifest), request_token)
        job.history.append((JobState.SUBMITTED, seq))
        self.jobs[job_id] = job
        if request_token is not None:
            self.tokens[request_token] = job_id
        self._apply(job, route(job, self.registry))
        return job

    def register_peer(self, peer_id: str, role: Role, device_model: str, now: float) -> PeerRecord:
        if peer_id in self.registry.peers:
            raise SchedulerError(f"peer {peer_id} already registered")
        if not device_model:
            raise SchedulerError("device_model must be non-empty")
        role = Role(role)
        self._tick(now)
        self._log(EventKind.PEER_EVENT, {
            "event": "register", "peer_id": peer_id, "role": role.value,
            "device_model": device_model, "t": now,
        })
        self._expire()
        peer = PeerRecord(peer_id, role, device_model)
        self.registry.peers[peer_id] = peer
        self.ensure_models(device_model)
        self._drain(device_model)
        return peer

    def heartbeat(self, peer_id: str, now: float) -> PeerRecord:
        peer = self.registry.peers.get(peer_id)
        if peer is None:
            raise SchedulerError(f"unknown peer {peer_id}")
        self._tick(now)
        if peer.state is PeerState.OFFLINE:
            self._log(EventKind.PEER_EVENT, {"event": "heartbeat", "peer_id": peer_id, "t": now})
            self._expire()
            peer.state = PeerState.IDLE
            self._drain(peer.device_model)
        return peer

    def offline(self, peer_id: str, now: float) -> PeerRecord:
        peer = self.registry.peers.get(peer_id)
        if peer is None:
            raise SchedulerError(f"unknown peer {peer_id}")
        self._tick(now)
        if peer.state is PeerState.OFFLINE:
            return peer
        self._log(EventKind.PEER_EVENT, {"event": "offline", "peer_id": peer_id, "t": now})
        self._expire()
        lost = self.jobs[peer.current_job] if peer.current_job else None
        peer.state = PeerState.OFFLINE
        peer.current_job = None
        if lost is not None:
            rc = self.registry.reliability_models.get(lost.device_model)
            pred = predict_abs_error(rc, lost.features) if rc is not None else None
            self._apply(lost, Decision(Action.FAIL, None, pred, False, PEER_LOST))
            self._resubmit(lost, pred)
            self._drain(lost.device_model)
        return peer

    def _resubmit(self, lost: Job, predicted: float | None) -> Job:
        """Queue a copy of ``lost`` at the head of its device's wait queue."""
        root = lost.job_id.split(".r", 1)[0]
        attempt = 1
        while f"{root}.r{attempt}" in self.jobs:
            attempt += 1
        job_id = f"{root}.r{attempt}"
        seq = self._log(EventKind.JOB_SUBMITTED, {
            "job_id": job_id,
            "request_token": None,
            "manifest": lost.manifest.to_dict(),
            "context": lost.context.to_dict(),
            "resubmission_of": lost.job_id,
            "t": self.clock,
        })
        job = Job(job_id, lost.manifest, lost.context, self.clock, lost.features,
                  resubmission_of=lost.job_id)
        job.history.append((JobState.SUBMITTED, seq))
        self.jobs[job_id] = job
        lost.resubmitted_as = job_id
        self._apply(job, Decision(Action.WAIT, None, predicted, False, PEER_LOST))
        return job

    def complete_hardware(self, job_id: str, energy_j: float, delta_t: float,
                          now: float) -> MeasurementRecord | None:
        job = self._running(job_id, hardware=True)
        self._tick(now)
        seq = self._log(EventKind.HARDWARE_RESULT, {
            "job_id": job_id, "energy_j": energy_j, "delta_t": delta_t, "t": now,
        })
        self._expire()
        device = job.device_model
        valid = (
            isinstance(energy_j, (int, float)) and isinstance(delta_t, (int, float))
            and math.isfinite(energy_j) and math.isfinite(delta_t)
            and energy_j >= 0 and delta_t > 0
        )
        if not valid:
            job.transition(JobState.FAILED, seq)
            job.reason = INVALID_MEASUREMENT
        else:
            self.ensure_models(device)
            em = self.registry.energy_models[device]
            rc = self.registry.reliability_models[device]
            e_est = estimate_energy(em, job.features, delta_t)
            eps = power_error(energy_j, e_est, delta_t)
            self.registry.energy_models[device] = update_energy_model(em, job.features, energy_j, delta_t)
            self.registry.reliability_models[device] = update_reliability_model(rc, job.features, eps)
            job.record = MeasurementRecord(job_id, float(energy_j), float(delta_t),
                                           Source.HARDWARE, seq, epsilon=eps)
            job.transition(JobState.COMPLETED, seq)
        self._free(job)
        self._drain(device)
        return job.record

    def complete_model(self, job_id: str, now: float,
                       delta_t: float | None = None) -> MeasurementRecord | None:
        job = self._running(job_id, hardware=False)
        self._tick(now)
        seq = self._log(EventKind.MODEL_RESULT, {"job_id": job_id, "delta_t": delta_t, "t": now})
        self._expire()
        dt = job.manifest.suite_duration_s if delta_t is None else delta_t
        em = self.registry.energy_models.get(job.device_model)
        if em is None:
            job.transition(JobState.FAILED, seq)
            job.reason = NO_MODEL
        elif not (isinstance(dt, (int, float)) and math.isfinite(dt) and dt > 0):
            job.transition(JobState.FAILED, seq)
            job.reason = INVALID_MEASUREMENT
        else:
            energy = estimate_energy(em, job.features, dt)
            job.record = MeasurementRecord(job_id, energy, float(dt), Source.MODEL, seq)
            job.transition(JobState.COMPLETED, seq)
        self._free(job)
        self._drain(job.device_model)
        return job.record

    # ---- snapshots -----------------------------------------------------

    def models_dict(self) -> dict:
        reg = self.registry
        return {
            "energy_models": {d: m.to_dict() for d, m in sorted(reg.energy_models.items())},
            "reliability_models": {d: m.to_dict() for d, m in sorted(reg.reliability_models.items())},
        }

    def snapshot(self, label: str) -> int:
        return self._log(EventKind.MODEL_SNAPSHOT_REF, {
            "label": label, "config": self.config.to_dict(), "t": self.clock, **self.models_dict(),
        })
