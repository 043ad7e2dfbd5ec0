from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driver import drive, make_config
from emaas.audit import audit_log
from emaas.core import ApiVocabulary, AppManifest, ExecutionContext, InstrumentedTest, Source
from emaas.events import EventKind
from emaas.replay import replay
from emaas.scheduler import (
    LEGAL_TRANSITIONS,
    NO_CAPACITY,
    PEER_LOST,
    WAIT_TIMEOUT,
    Action,
    JobState,
    PeerState,
    Role,
    Scheduler,
    SchedulerConfig,
    SchedulerError,
)

VOCAB = ApiVocabulary(("net", "gps", "cam"))


def app(app_id="app", calls=None, duration=10.0):
    return AppManifest(app_id, calls or {"net": 3, "gps": 1}, {}, (InstrumentedTest("t", duration),))


def ctx(device):
    return ExecutionContext(device)


def make(**kw) -> Scheduler:
    return Scheduler(SchedulerConfig(VOCAB, **kw))


def trust(s: Scheduler, device: str, power=None) -> None:
    """Make the device's gate pass for every job, optionally fixing the energy model."""
    reg = s.registry
    s.ensure_models(device)
    rc = reg.reliability_models[device]
    reg.reliability_models[device] = replace(rc, v=np.zeros_like(rc.v), n=rc.n_min)
    if power is not None:
        em = reg.energy_models[device]
        w = np.zeros_like(em.w)
        w[0] = power
        reg.energy_models[device] = replace(em, w=w)


def actions(job):
    return [d["action"] for d in job.decisions]


# ---- routing ------------------------------------------------------------


def test_idle_super_provider_gets_the_job():
    s = make()
    s.register_peer("x-sp", Role.SUPER_PROVIDER, "X", 0)
    s.register_peer("x-p", Role.PROVIDER, "X", 0)
    trust(s, "X")
    job = s.submit(app(), ctx("X"), 1)
    assert actions(job) == ["assign_hardware"]
    assert job.peer_id == "x-sp" and job.state is JobState.RUNNING


def test_busy_super_provider_and_reliable_model_goes_to_provider():
    s = make()
    s.register_peer("y-sp", Role.SUPER_PROVIDER, "Y", 0)
    s.register_peer("y-p", Role.PROVIDER, "Y", 0)
    s.submit(app("first"), ctx("Y"), 1)
    trust(s, "Y")
    job = s.submit(app("second"), ctx("Y"), 2)
    assert actions(job) == ["assign_model"]
    assert job.peer_id == "y-p" and job.route is Source.MODEL


def test_busy_super_provider_and_unreliable_model_waits():
    s = make()
    s.register_peer("y-sp", Role.SUPER_PROVIDER, "Y", 0)
    s.register_peer("y-p", Role.PROVIDER, "Y", 0)
    s.submit(app("first"), ctx("Y"), 1)
    job = s.submit(app("second"), ctx("Y"), 2)
    assert actions(job) == ["wait"]
    assert job.state is JobState.WAITING and s.queue_position(job.job_id) == 0


def test_unknown_device_fails_fast():
    s = make()
    job = s.submit(app(), ctx("Z"), 1)
    assert job.state is JobState.FAILED and job.reason == NO_CAPACITY


def test_providers_only_and_gate_closed_fails_fast():
    s = make()
    s.register_peer("z-p", Role.PROVIDER, "Z", 0)
    job = s.submit(app(), ctx("Z"), 1)
    assert job.state is JobState.FAILED and job.reason == NO_CAPACITY


def test_never_assigned_across_devices():
    s = make()
    s.register_peer("x-sp", Role.SUPER_PROVIDER, "X", 0)
    job = s.submit(app(), ctx("Y"), 1)
    assert job.state is JobState.FAILED
    assert s.registry.peers["x-sp"].state is PeerState.IDLE


def test_least_recently_used_then_peer_id():
    s = make()
    for pid in ("sp-b", "sp-a"):
        s.register_peer(pid, Role.SUPER_PROVIDER, "X", 0)
    j1 = s.submit(app("1"), ctx("X"), 1)
    assert j1.peer_id == "sp-a"
    s.complete_hardware(j1.job_id, 5.0, 10.0, 2)
    j2 = s.submit(app("2"), ctx("X"), 3)
    assert j2.peer_id == "sp-b"


def test_decisions_are_deterministic():
    def run():
        s = make()
        s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
        s.register_peer("p", Role.PROVIDER, "X", 0)
        for i in range(5):
            s.submit(app(str(i)), ctx("X"), i + 1)
        return [e.to_json() for e in s.log]
    assert run() == run()


# ---- hardware completion ------------------------------------------------


def test_hardware_completion_on_fresh_model():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    job = s.submit(app(), ctx("X"), 1)
    rec = s.complete_hardware(job.job_id, 6.0, 3.0, 2)
    assert rec.epsilon == 2.0 and rec.source is Source.HARDWARE
    assert s.registry.energy_models["X"].n == 1
    assert s.registry.reliability_models["X"].n == 1
    assert job.state is JobState.COMPLETED
    assert s.registry.peers["sp"].state is PeerState.IDLE


def test_hardware_completion_matching_estimate_records_zero_error():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    trust(s, "X", power=1.5)
    job = s.submit(app(), ctx("X"), 1)
    rec = s.complete_hardware(job.job_id, 15.0, 10.0, 2)
    assert rec.epsilon == 0.0
    assert s.registry.reliability_models["X"].n == s.config.n_min + 1


@pytest.mark.parametrize("energy, dt", [(-1.0, 3.0), (6.0, 0.0), (6.0, -1.0), (float("nan"), 3.0)])
def test_bad_hardware_result_fails_job_and_leaves_models(energy, dt):
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    job = s.submit(app(), ctx("X"), 1)
    before = s.models_dict()
    assert s.complete_hardware(job.job_id, energy, dt, 2) is None
    assert job.state is JobState.FAILED
    assert s.models_dict() == before
    assert s.registry.peers["sp"].state is PeerState.IDLE


def test_completion_drains_waiting_job_in_same_step():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    first = s.submit(app("1"), ctx("X"), 1)
    second = s.submit(app("2"), ctx("X"), 2)
    assert second.state is JobState.WAITING
    s.complete_hardware(first.job_id, 6.0, 3.0, 3)
    assert second.state is JobState.RUNNING and second.peer_id == "sp"


def test_result_for_job_not_running_is_rejected():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    job = s.submit(app(), ctx("X"), 1)
    with pytest.raises(SchedulerError):
        s.complete_model(job.job_id, 2)
    with pytest.raises(SchedulerError):
        s.complete_hardware("job-999999", 1.0, 1.0, 2)
    n = len(s.log)
    s.complete_hardware(job.job_id, 1.0, 1.0, 2)
    with pytest.raises(SchedulerError):
        s.complete_hardware(job.job_id, 1.0, 1.0, 3)
    assert len(s.log) == n + 1


# ---- model completion ---------------------------------------------------


def test_model_completion_returns_estimate():
    s = make()
    s.register_peer("p", Role.PROVIDER, "Y", 0)
    trust(s, "Y", power=1.2)
    before = s.models_dict()
    job = s.submit(app(duration=10.0), ctx("Y"), 1)
    rec = s.complete_model(job.job_id, 2)
    assert rec.energy_j == pytest.approx(12.0, abs=1e-12)
    assert rec.source is Source.MODEL and rec.epsilon is None
    assert "epsilon" not in rec.to_dict()
    assert s.models_dict() == before
    assert s.registry.peers["p"].state is PeerState.IDLE


# ---- peer events --------------------------------------------------------


def test_new_super_provider_picks_up_waiting_job():
    s = make()
    s.register_peer("sp1", Role.SUPER_PROVIDER, "X", 0)
    s.submit(app("1"), ctx("X"), 1)
    waiting = s.submit(app("2"), ctx("X"), 2)
    s.register_peer("sp2", Role.SUPER_PROVIDER, "X", 3)
    assert waiting.state is JobState.RUNNING and waiting.peer_id == "sp2"


def test_offline_busy_peer_fails_job_and_resubmits_at_head():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    lost = s.submit(app("1"), ctx("X"), 1)
    behind = s.submit(app("2"), ctx("X"), 2)
    s.offline("sp", 3)
    assert lost.state is JobState.FAILED and lost.reason == PEER_LOST
    retry = s.jobs[lost.resubmitted_as]
    assert retry.job_id == "job-000001.r1" and retry.resubmission_of == lost.job_id
    assert retry.manifest == lost.manifest and retry.state is JobState.WAITING
    assert s.queue_position(retry.job_id) == 0 and s.queue_position(behind.job_id) == 1
    s.heartbeat("sp", 4)
    assert retry.state is JobState.RUNNING and behind.state is JobState.WAITING
    s.offline("sp", 5)
    assert retry.resubmitted_as == "job-000001.r2"


def test_heartbeat_on_idle_peer_changes_nothing():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    n = len(s.log)
    s.heartbeat("sp", 1)
    assert len(s.log) == n and s.registry.peers["sp"].state is PeerState.IDLE


def test_peer_event_rejections():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    with pytest.raises(SchedulerError):
        s.register_peer("sp", Role.PROVIDER, "X", 1)
    with pytest.raises(SchedulerError):
        s.heartbeat("ghost", 1)
    with pytest.raises(SchedulerError):
        s.register_peer("p", Role.PROVIDER, "", 1)


def test_time_cannot_go_backwards():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 5)
    with pytest.raises(SchedulerError):
        s.submit(app(), ctx("X"), 4)


# ---- waiting ------------------------------------------------------------


def test_fifo_among_waiting_jobs():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    running = s.submit(app("0"), ctx("X"), 1)
    waiting = [s.submit(app(str(i)), ctx("X"), 2 + i) for i in range(1, 4)]
    order = []
    t = 10
    for _ in range(4):
        s.complete_hardware(running.job_id, 6.0, 3.0, t)
        t += 1
        nxt = [j for j in waiting if j.state is JobState.RUNNING]
        if not nxt:
            break
        running = nxt[0]
        order.append(running.job_id)
    assert order == [j.job_id for j in waiting]


def test_waiting_job_downgrades_to_model_once_gate_opens():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    s.register_peer("p", Role.PROVIDER, "X", 0)
    s.submit(app("0"), ctx("X"), 1)
    waiting = s.submit(app("1"), ctx("X"), 2)
    trust(s, "X")
    s.offline("p", 3)
    s.heartbeat("p", 4)
    assert actions(waiting) == ["wait", "assign_model"]


def test_wait_timeout():
    s = make(max_wait=10.0)
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    s.submit(app("0"), ctx("X"), 1)
    waiting = s.submit(app("1"), ctx("X"), 2)
    s.submit(app("2"), ctx("Y"), 13)
    assert waiting.state is JobState.FAILED and waiting.reason == WAIT_TIMEOUT


def test_idempotent_request_token():
    s = make()
    s.register_peer("sp", Role.SUPER_PROVIDER, "X", 0)
    a = s.submit(app(), ctx("X"), 1, request_token="abc")
    n = len(s.log)
    b = s.submit(app("other"), ctx("X"), 2, request_token="abc")
    assert a is b and len(s.log) == n


# ---- invariants over random workloads ------------------------------------


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_workloads_hold_invariants(seed):
    s = drive(seed, 600)
    events = list(s.log)
    assert audit_log(events) == []
    for job in s.jobs.values():
        states = [st_ for st_, _ in job.history]
        assert states[0] is JobState.SUBMITTED
        for a, b in zip(states, states[1:]):
            assert b in LEGAL_TRANSITIONS[a]
    for peer in s.registry.peers.values():
        assert (peer.state is PeerState.BUSY) == (peer.current_job is not None)
    seen = set()
    for device, q in s.registry.wait_queues.items():
        for jid in q:
            assert s.jobs[jid].state is JobState.WAITING and s.jobs[jid].device_model == device
            assert jid not in seen
            seen.add(jid)
    assert replay(events).verified is True


def test_model_assignments_only_when_gate_passed():
    s = drive(99, 3000)
    model = [e.payload for e in s.log if e.kind is EventKind.DECISION
             and e.payload["action"] == Action.ASSIGN_MODEL.value]
    assert model, "workload should exercise the model route"
    for d in model:
        assert d["reliable"] and d["predicted_abs_error"] <= d["theta"]
        assert d["n_r"] >= s.config.n_min


def test_update_counts_match_hardware_results():
    s = drive(7, 3000)
    hw = {}
    for e in s.log:
        if e.kind is EventKind.HARDWARE_RESULT:
            job = s.jobs[e.payload["job_id"]]
            if job.record is not None:
                hw[job.device_model] = hw.get(job.device_model, 0) + 1
    for device, em in s.registry.energy_models.items():
        assert em.n == hw.get(device, 0)
        assert s.registry.reliability_models[device].n == hw.get(device, 0)


def test_auditor_flags_tampered_log():
    s = drive(1, 800, make_config())
    events = list(s.log)
    idx = next(i for i, e in enumerate(events) if e.kind is EventKind.DECISION
               and e.payload["action"] == "assign_hardware")
    bad = events[idx]
    tampered = dict(bad.payload, action="assign_model", reliable=False)
    events[idx] = type(bad)(bad.seq, bad.kind, tampered)
    rules = {v.rule for v in audit_log(events)}
    assert "gate-before-assign-model" in rules and "peer-role" in rules
    del events[5]
    assert "dense-seq" in {v.rule for v in audit_log(events)}
