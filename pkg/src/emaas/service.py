"""Broker service: JSON-over-HTTP front end for the scheduler.

All requests are funnelled through one lock into the scheduler, so the
persisted log is a single serialized event stream. State-changing requests
are acknowledged only after their events have been written (and fsynced when
configured). On start-up an existing log is replayed to restore state.
"""

from __future__ import annotations

import json
import logging
import re
import signal
import threading
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable
from urllib.parse import unquote

import numpy as np

from .core import (
    DEFAULT_LAMBDA,
    DEFAULT_N_MIN,
    DEFAULT_P0,
    DEFAULT_THETA,
    ApiVocabulary,
    AppManifest,
    ExecutionContext,
    SchemaError,
)
from .events import EventLog, JsonlEventLog, read_log
from .replay import replay
from .scheduler import JobState, Role, Scheduler, SchedulerConfig, SchedulerError

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, path: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.path = path

    def to_dict(self) -> dict:
        doc = {"error": self.code, "message": self.message}
        if self.path is not None:
            doc["path"] = self.path
        return doc


@dataclass
class ServiceConfig:
    vocab: ApiVocabulary
    cx_names: tuple[str, ...] = ()
    host: str = "127.0.0.1"
    port: int = 8080
    log_path: str | None = None
    theta: float = DEFAULT_THETA
    n_min: int = DEFAULT_N_MIN
    lam: float = DEFAULT_LAMBDA
    p0: float = DEFAULT_P0
    max_wait: float | None = None
    heartbeat_timeout: float | None = 30.0
    snapshot_every: int = 100
    fsync: bool = True
    # token -> {"role": "developer" | "peer" | "admin", "peer_id": optional}
    tokens: dict[str, dict] = field(default_factory=dict)

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(self.vocab, self.cx_names, self.theta, self.n_min,
                               self.lam, self.p0, self.max_wait)

    @classmethod
    def from_dict(cls, doc: dict) -> "ServiceConfig":
        if not isinstance(doc, dict):
            raise SchemaError("$", "config must be an object")
        if "vocab" not in doc:
            raise SchemaError("vocab", "required")
        vocab = ApiVocabulary.from_dict(doc["vocab"])
        listen = doc.get("listen", "127.0.0.1:8080")
        host, _, port = str(listen).rpartition(":")
        if not host or not port.isdigit():
            raise SchemaError("listen", "must look like host:port")
        gate = doc.get("gate", {})
        return cls(
            vocab=vocab,
            cx_names=tuple(doc.get("cx_names", ())),
            host=host,
            port=int(port),
            log_path=doc.get("log_path"),
            theta=float(gate.get("theta", DEFAULT_THETA)),
            n_min=int(gate.get("n_min", DEFAULT_N_MIN)),
            lam=float(gate.get("lambda", DEFAULT_LAMBDA)),
            p0=float(gate.get("p0", DEFAULT_P0)),
            max_wait=gate.get("max_wait"),
            heartbeat_timeout=doc.get("heartbeat_timeout", 30.0),
            snapshot_every=int(doc.get("snapshot_every", 100)),
            fsync=bool(doc.get("fsync", True)),
            tokens=dict(doc.get("tokens", {})),
        )


def _record_dict(job) -> dict | None:
    return None if job.record is None else job.record.to_dict()


class BrokerService:
    def __init__(self, config: ServiceConfig, clock: Callable[[], float] = time.time):
        self.config = config
        self.clock = clock
        self._lock = threading.RLock()
        self.hardware_results = 0
        if config.log_path is not None and Path(config.log_path).exists():
            events, partial = read_log(config.log_path)
            if partial:
                raise SchedulerError(f"log {config.log_path} ends in a truncated event")
            restored = replay(events).scheduler if events else None
            event_log = JsonlEventLog(config.log_path, fsync=config.fsync)
            if restored is not None:
                restored.log = event_log
                self.sched = restored
            else:
                self.sched = Scheduler(config.scheduler_config(), event_log)
        else:
            event_log = (JsonlEventLog(config.log_path, fsync=config.fsync)
                         if config.log_path else EventLog())
            self.sched = Scheduler(config.scheduler_config(), event_log)
        start = self.now()
        self.last_seen = {pid: start for pid in self.sched.registry.peers}

    def now(self) -> float:
        return max(self.clock(), self.sched.clock)

    # ---- auth ----------------------------------------------------------

    def authorize(self, token: str | None, roles: tuple[str, ...], peer_id: str | None = None) -> None:
        if not self.config.tokens:
            return
        entry = self.config.tokens.get(token or "")
        if entry is None:
            raise ApiError(HTTPStatus.UNAUTHORIZED, "unauthorized", "missing or unknown bearer token")
        role = entry.get("role")
        if role == "admin":
            return
        if role not in roles:
            raise ApiError(HTTPStatus.FORBIDDEN, "forbidden", f"role {role!r} may not call this endpoint")
        bound = entry.get("peer_id")
        if peer_id is not None and bound is not None and bound != peer_id:
            raise ApiError(HTTPStatus.FORBIDDEN, "forbidden", "token is bound to another peer")

    # ---- developer API -------------------------------------------------

    def submit_job(self, body: Any) -> dict:
        if not isinstance(body, dict):
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "body must be an object", "$")
        try:
            manifest = AppManifest.from_dict(body.get("manifest"))
        except SchemaError as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", exc.message, exc.path) from None
        try:
            context = ExecutionContext.from_dict(body.get("context"))
        except SchemaError as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", exc.message, f"context.{exc.path}") from None
        token = body.get("request_token")
        if token is not None and not isinstance(token, str):
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "must be a string", "request_token")
        with self._lock:
            self.sweep()
            job = self.sched.submit(manifest, context, self.now(), request_token=token)
            return self._status(job)

    def job_status(self, job_id: str) -> dict:
        with self._lock:
            job = self.sched.jobs.get(job_id)
            if job is None:
                raise ApiError(HTTPStatus.NOT_FOUND, "not_found", f"unknown job {job_id}")
            return self._status(job)

    def _status(self, job) -> dict:
        doc: dict[str, Any] = {
            "job_id": job.job_id,
            "state": job.state.value,
            "device_model": job.device_model,
            "decision_trace": [
                {k: d[k] for k in ("seq", "action", "peer_id", "predicted_abs_error",
                                   "reliable", "theta", "n_r", "reason")}
                for d in job.decisions
            ],
        }
        if job.state is JobState.WAITING:
            doc["queue_position"] = self.sched.queue_position(job.job_id)
        if job.record is not None:
            doc["record"] = _record_dict(job)
        if job.reason is not None:
            doc["reason"] = job.reason
        if job.resubmission_of is not None:
            doc["resubmission_of"] = job.resubmission_of
        if job.resubmitted_as is not None:
            doc["resubmitted_as"] = job.resubmitted_as
        return doc

    # ---- peer API ------------------------------------------------------

    def register_peer(self, body: Any) -> dict:
        if not isinstance(body, dict):
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "body must be an object", "$")
        peer_id, role, device = body.get("peer_id"), body.get("role"), body.get("device_model")
        if not isinstance(peer_id, str) or not peer_id:
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "must be a non-empty string", "peer_id")
        if role not in {r.value for r in Role}:
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "must be provider or super_provider", "role")
        if not isinstance(device, str) or not device:
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "must be a non-empty string", "device_model")
        with self._lock:
            self.sweep()
            if peer_id in self.sched.registry.peers:
                raise ApiError(HTTPStatus.CONFLICT, "duplicate", f"peer {peer_id} already registered")
            peer = self.sched.register_peer(peer_id, Role(role), device, self.now())
            self.last_seen[peer_id] = self.now()
            return self._peer(peer)

    def heartbeat(self, peer_id: str) -> dict:
        with self._lock:
            if peer_id not in self.sched.registry.peers:
                raise ApiError(HTTPStatus.NOT_FOUND, "not_found", f"unknown peer {peer_id}")
            self.last_seen[peer_id] = self.now()
            self.sweep()
            peer = self.sched.heartbeat(peer_id, self.now())
            return self._peer(peer)

    def _peer(self, peer) -> dict:
        doc = peer.to_dict()
        doc["assignment"] = None
        if peer.current_job is not None:
            job = self.sched.jobs[peer.current_job]
            doc["assignment"] = {
                "job_id": job.job_id,
                "route": job.route.value,
                "manifest": job.manifest.to_dict(),
                "context": job.context.to_dict(),
            }
        return doc

    def submit_result(self, peer_id: str, body: Any) -> dict:
        if not isinstance(body, dict) or not isinstance(body.get("job_id"), str):
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "must be a string", "job_id")
        job_id = body["job_id"]
        with self._lock:
            if peer_id not in self.sched.registry.peers:
                raise ApiError(HTTPStatus.NOT_FOUND, "not_found", f"unknown peer {peer_id}")
            job = self.sched.jobs.get(job_id)
            if job is None:
                raise ApiError(HTTPStatus.NOT_FOUND, "not_found", f"unknown job {job_id}")
            if job.state is not JobState.RUNNING or job.peer_id != peer_id:
                raise ApiError(HTTPStatus.CONFLICT, "not_assignee",
                               f"peer {peer_id} is not the assignee of {job_id}")
            self.last_seen[peer_id] = self.now()
            if job.route.value == "hardware":
                # malformed values go through so the job is failed and the attempt logged
                self.sched.complete_hardware(job_id, body.get("energy_j"), body.get("delta_t"),
                                             self.now())
                if job.record is not None:
                    self.hardware_results += 1
                    if self.config.snapshot_every and self.hardware_results % self.config.snapshot_every == 0:
                        self.sched.snapshot("periodic")
            else:
                self.sched.complete_model(job_id, self.now(), body.get("delta_t"))
            self.sweep()
            return self._status(job)

    def sweep(self) -> list[str]:
        """Mark peers whose heartbeat is overdue as offline; their jobs are requeued."""
        timeout = self.config.heartbeat_timeout
        if timeout is None:
            return []
        lost = []
        with self._lock:
            now = self.now()
            for pid, peer in sorted(self.sched.registry.peers.items()):
                if peer.state.value != "offline" and now - self.last_seen.get(pid, now) > timeout:
                    self.sched.offline(pid, now)
                    lost.append(pid)
        return lost

    # ---- read-only -----------------------------------------------------

    def model_info(self, device: str) -> dict:
        with self._lock:
            em = self.sched.registry.energy_models.get(device)
            if em is None:
                raise ApiError(HTTPStatus.NOT_FOUND, "not_found", f"no model for device {device}")
            rc = self.sched.registry.reliability_models[device]
            return {
                "device_model": device,
                "energy": {"n": em.n, "w": em.w.tolist(), "lambda": em.lam},
                "reliability": {"n": rc.n, "v": rc.v.tolist(), "theta": rc.theta, "n_min": rc.n_min},
            }

    def metrics(self) -> dict:
        with self._lock:
            counts = {"hardware": 0, "model": 0}
            states: dict[str, int] = {}
            for job in self.sched.jobs.values():
                states[job.state.value] = states.get(job.state.value, 0) + 1
                if job.record is not None:
                    counts[job.record.source.value] += 1
            done = counts["hardware"] + counts["model"]
            reg = self.sched.registry
            return {
                "hardware_completed": counts["hardware"],
                "model_completed": counts["model"],
                "hardware_fraction": counts["hardware"] / done if done else None,
                "jobs": dict(sorted(states.items())),
                "queue_depths": {d: len(q) for d, q in sorted(reg.wait_queues.items())},
                "models": {
                    d: {"n": em.n, "n_r": reg.reliability_models[d].n,
                        "theta": reg.reliability_models[d].theta,
                        "weight_norm": float(np.linalg.norm(em.w))}
                    for d, em in sorted(reg.energy_models.items())
                },
                "events": len(self.sched.log),
            }

    def snapshot(self, label: str = "manual") -> int:
        with self._lock:
            return self.sched.snapshot(label)

    def close(self) -> None:
        """Write a closing snapshot so the log can be verified on replay, then close it."""
        with self._lock:
            self.sched.snapshot("shutdown")
            self.sched.log.close()


_ROUTES: list[tuple[str, re.Pattern, str]] = [
    ("POST", re.compile(r"^/jobs$"), "post_job"),
    ("GET", re.compile(r"^/jobs/(?P<job_id>[^/]+)$"), "get_job"),
    ("POST", re.compile(r"^/peers$"), "post_peer"),
    ("POST", re.compile(r"^/peers/(?P<peer_id>[^/]+)/heartbeat$"), "post_heartbeat"),
    ("POST", re.compile(r"^/peers/(?P<peer_id>[^/]+)/result$"), "post_result"),
    ("GET", re.compile(r"^/models/(?P<device>[^/]+)$"), "get_model"),
    ("GET", re.compile(r"^/metrics$"), "get_metrics"),
]


class _Handler(BaseHTTPRequestHandler):
    service: BrokerService
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, doc: dict) -> None:
        body = json.dumps(doc, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _body(self) -> Any:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            return json.loads(raw)
        except ValueError:
            raise ApiError(HTTPStatus.BAD_REQUEST, "schema", "body is not valid JSON", "$") from None

    def _token(self) -> str | None:
        header = self.headers.get("Authorization", "")
        return header[7:] if header.startswith("Bearer ") else None

    def _dispatch(self, method: str) -> None:
        path = self.path.split("?", 1)[0]
        try:
            for m, pattern, name in _ROUTES:
                match = pattern.match(path)
                if match and m == method:
                    # ids may contain '/', sent percent-encoded
                    params = {k: unquote(v) for k, v in match.groupdict().items()}
                    status, doc = getattr(self, name)(**params)
                    self._send(status, doc)
                    return
            raise ApiError(HTTPStatus.NOT_FOUND, "not_found", f"no route for {method} {path}")
        except ApiError as exc:
            self._send(exc.status, exc.to_dict())
        except SchedulerError as exc:
            self._send(HTTPStatus.CONFLICT, {"error": "rejected", "message": str(exc)})
        except Exception:  # noqa: BLE001
            log.exception("unhandled error on %s %s", method, path)
            self._send(HTTPStatus.INTERNAL_SERVER_ERROR, {"error": "internal", "message": "internal error"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def post_job(self):
        self.service.authorize(self._token(), ("developer",))
        return HTTPStatus.CREATED, self.service.submit_job(self._body())

    def get_job(self, job_id):
        self.service.authorize(self._token(), ("developer",))
        return HTTPStatus.OK, self.service.job_status(job_id)

    def post_peer(self):
        body = self._body()
        self.service.authorize(self._token(), ("peer",),
                               body.get("peer_id") if isinstance(body, dict) else None)
        return HTTPStatus.CREATED, self.service.register_peer(body)

    def post_heartbeat(self, peer_id):
        self.service.authorize(self._token(), ("peer",), peer_id)
        return HTTPStatus.OK, self.service.heartbeat(peer_id)

    def post_result(self, peer_id):
        body = self._body()
        self.service.authorize(self._token(), ("peer",), peer_id)
        return HTTPStatus.OK, self.service.submit_result(peer_id, body)

    def get_model(self, device):
        self.service.authorize(self._token(), ("developer", "peer"))
        return HTTPStatus.OK, self.service.model_info(device)

    def get_metrics(self):
        self.service.authorize(self._token(), ("developer", "peer"))
        return HTTPStatus.OK, self.service.metrics()


class _Server(ThreadingHTTPServer):
    # the default backlog of 5 resets connections under bursts of submissions
    request_queue_size = 128
    daemon_threads = True


def make_server(service: BrokerService, host: str | None = None,
                port: int | None = None) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    server = _Server((host or service.config.host,
                                  service.config.port if port is None else port), handler)
    return server


def serve(config: ServiceConfig) -> None:
    service = BrokerService(config)
    server = make_server(service)
    stop = threading.Event()

    def reaper():
        while not stop.wait(1.0):
            service.sweep()

    threading.Thread(target=reaper, daemon=True).start()
    if threading.current_thread() is threading.main_thread():
        # SIGTERM gets the same orderly close as Ctrl-C
        signal.signal(signal.SIGTERM, signal.default_int_handler)
    log.info("broker listening on %s:%s", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        log.info("shutting down")
    finally:
        stop.set()
        server.server_close()
        service.close()
