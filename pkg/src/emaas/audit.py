"""Check scheduler invariants from an event log alone.

The auditor rebuilds peer states, job states and wait queues from the log
without using any scheduler code except the transition table, then reports
every violation it finds.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass

from .events import EventKind, PersistedEvent
from .scheduler import LEGAL_TRANSITIONS, PEER_LOST, JobState


@dataclass(frozen=True)
class Violation:
    seq: int
    rule: str
    detail: str


def audit_log(events: list[PersistedEvent]) -> list[Violation]:
    out: list[Violation] = []
    config = None
    peers: dict[str, dict] = {}
    jobs: dict[str, JobState] = {}
    job_device: dict[str, str] = {}
    job_peer: dict[str, str] = {}
    queues: dict[str, deque[str]] = {}
    hw_results: Counter[str] = Counter()
    snapshot_n: dict[str, tuple[int, int]] = {}

    def move(seq: int, job_id: str, new: JobState) -> None:
        old = jobs.get(job_id)
        if old is None or new not in LEGAL_TRANSITIONS[old]:
            out.append(Violation(seq, "legal-transition", f"{job_id}: {old} -> {new.value}"))
        jobs[job_id] = new

    def free(job_id: str) -> None:
        pid = job_peer.pop(job_id, None)
        if pid is not None and peers[pid]["state"] == "busy":
            peers[pid]["state"] = "idle"

    def settled(seq: int) -> None:
        # checked once an input's decisions are all in
        for device, q in queues.items():
            idle_super = sorted(pid for pid, peer in peers.items() if peer["device"] == device
                                and peer["role"] == "super_provider" and peer["state"] == "idle")
            if q and idle_super:
                out.append(Violation(seq, "wait-with-idle-super-provider",
                                     f"{q[0]} waits while {idle_super} idle"))

    for expected, ev in enumerate(events, start=1):
        if ev.kind is not EventKind.DECISION:
            settled(ev.seq - 1)
        if ev.seq != expected:
            out.append(Violation(ev.seq, "dense-seq", f"expected {expected}"))
        p = ev.payload
        if ev.kind is EventKind.MODEL_SNAPSHOT_REF:
            if config is None:
                config = p.get("config")
            for device, doc in p.get("energy_models", {}).items():
                snapshot_n[device] = (doc["n"], p["reliability_models"][device]["n"])
            for device, (n_e, n_r) in snapshot_n.items():
                if ev.seq > 1 and not n_e == n_r == hw_results[device]:
                    out.append(Violation(ev.seq, "one-update-per-hardware-result",
                                         f"{device}: energy n={n_e}, reliability n={n_r}, "
                                         f"hardware results={hw_results[device]}"))
        elif ev.kind is EventKind.PEER_EVENT:
            pid = p["peer_id"]
            if p["event"] == "register":
                peers[pid] = {"device": p["device_model"], "role": p["role"], "state": "idle"}
            elif p["event"] == "heartbeat":
                peers[pid]["state"] = "idle"
            elif p["event"] == "offline":
                peers[pid]["state"] = "offline"
                for jid, holder in list(job_peer.items()):
                    if holder == pid:
                        del job_peer[jid]
        elif ev.kind is EventKind.JOB_SUBMITTED:
            jobs[p["job_id"]] = JobState.SUBMITTED
            job_device[p["job_id"]] = p["context"]["device_model"]
        elif ev.kind is EventKind.DECISION:
            jid, action, device = p["job_id"], p["action"], job_device.get(p["job_id"])
            q = queues.setdefault(device, deque())
            was_waiting = jobs.get(jid) is JobState.WAITING
            if action in ("assign_hardware", "assign_model"):
                peer = peers.get(p["peer_id"])
                if peer is None or peer["device"] != device:
                    out.append(Violation(ev.seq, "device-match", f"{jid} -> {p['peer_id']}"))
                elif peer["state"] != "idle":
                    out.append(Violation(ev.seq, "peer-idle", f"{p['peer_id']} is {peer['state']}"))
                want_role = "super_provider" if action == "assign_hardware" else "provider"
                if peer is not None and peer["role"] != want_role:
                    out.append(Violation(ev.seq, "peer-role", f"{action} to {peer['role']}"))
                if action == "assign_model":
                    pred = p["predicted_abs_error"]
                    if not (p["reliable"] and pred is not None and pred <= p["theta"]
                            and (config is None or p["n_r"] >= config["n_min"])):
                        out.append(Violation(ev.seq, "gate-before-assign-model",
                                             f"{jid}: predicted={pred} theta={p['theta']}"))
                if was_waiting:
                    if not q or q[0] != jid:
                        out.append(Violation(ev.seq, "fifo", f"{jid} assigned ahead of {q[0] if q else None}"))
                    if jid in q:
                        q.remove(jid)
                move(ev.seq, jid, JobState.ASSIGNED_HARDWARE if action == "assign_hardware"
                     else JobState.ASSIGNED_MODEL)
                move(ev.seq, jid, JobState.RUNNING)
                if peer is not None:
                    peer["state"] = "busy"
                job_peer[jid] = p["peer_id"]
            elif action == "wait":
                if p["reason"] == PEER_LOST:
                    q.appendleft(jid)
                else:
                    q.append(jid)
                move(ev.seq, jid, JobState.WAITING)
            elif action == "fail":
                if was_waiting and jid in q:
                    q.remove(jid)
                move(ev.seq, jid, JobState.FAILED)
            else:
                out.append(Violation(ev.seq, "unknown-action", action))
        elif ev.kind in (EventKind.HARDWARE_RESULT, EventKind.MODEL_RESULT):
            jid = p["job_id"]
            ok = True
            if ev.kind is EventKind.HARDWARE_RESULT:
                e, dt = p["energy_j"], p["delta_t"]
                ok = (isinstance(e, (int, float)) and isinstance(dt, (int, float))
                      and e == e and dt == dt and abs(e) != float("inf")
                      and abs(dt) != float("inf") and e >= 0 and dt > 0)
                if ok:
                    hw_results[job_device[jid]] += 1
            else:
                dt = p.get("delta_t")
                ok = dt is None or (dt == dt and abs(dt) != float("inf") and dt > 0)
            move(ev.seq, jid, JobState.COMPLETED if ok else JobState.FAILED)
            free(jid)
    if events:
        settled(events[-1].seq)
    return out
