"""Random workload driver shared by the scheduler property tests and the acceptance run."""

import numpy as np

from emaas.core import ApiVocabulary, AppManifest, ExecutionContext, InstrumentedTest
from emaas.scheduler import JobState, PeerState, Role, Scheduler, SchedulerConfig, SchedulerError

APIS = tuple(f"api.{i}" for i in range(8))
DEVICES = ("dev-A", "dev-B", "dev-C")


def make_config(**overrides) -> SchedulerConfig:
    kw = dict(vocab=ApiVocabulary(APIS[:6]), cx_names=("cx",), theta=0.3, n_min=5, max_wait=40.0)
    kw.update(overrides)
    return SchedulerConfig(**kw)


def random_manifest(rng: np.random.Generator, app_id: str) -> AppManifest:
    k = int(rng.integers(1, 4))
    names = rng.choice(APIS, size=k, replace=False)
    calls = {str(n): int(rng.integers(1, 50)) for n in names}
    tests = (InstrumentedTest("t0", float(rng.uniform(1, 20))),)
    return AppManifest(app_id, calls, {"cx": float(rng.uniform(0, 1))}, tests)


def drive(seed: int, n_events: int, config: SchedulerConfig | None = None) -> Scheduler:
    """Feed a scheduler random inputs until its log holds at least ``n_events`` events.

    Peers come and go, some results are malformed, some jobs target devices
    with no hardware at all, and the clock sometimes jumps past max_wait.
    """
    rng = np.random.default_rng(seed)
    s = Scheduler(config or make_config())
    truth = {d: rng.uniform(0.2, 2.0, size=s.config.dim + 1) for d in DEVICES}
    now = 0.0
    counter = 0
    while len(s.log) < n_events:
        now += float(rng.exponential(1.0)) if rng.random() > 0.02 else 60.0
        op = rng.random()
        peers = list(s.registry.peers.values())
        running = [j for j in s.jobs.values() if j.state is JobState.RUNNING]
        try:
            if op < 0.06 or not peers:
                counter += 1
                device = str(rng.choice(DEVICES))
                role = Role.SUPER_PROVIDER if rng.random() < 0.4 else Role.PROVIDER
                # dev-C never gets a super-provider
                if device == "dev-C":
                    role = Role.PROVIDER
                s.register_peer(f"{device}/peer-{counter}", role, device, now)
            elif op < 0.45:
                counter += 1
                device = str(rng.choice(DEVICES + ("dev-none",), p=[0.4, 0.3, 0.25, 0.05]))
                token = f"tok-{int(rng.integers(0, 10_000))}" if rng.random() < 0.3 else None
                s.submit(random_manifest(rng, f"app-{counter}"), ExecutionContext(device), now,
                         request_token=token)
            elif op < 0.80 and running:
                job = running[int(rng.integers(len(running)))]
                if job.peer_id and job.route and job.route.value == "hardware":
                    dt = job.manifest.suite_duration_s
                    x = np.concatenate([[1.0], job.features])
                    energy = max(float(truth[job.device_model] @ x) * dt + float(rng.normal(0, 0.01)), 0.0)
                    if rng.random() < 0.03:
                        energy = float("nan") if rng.random() < 0.5 else -1.0
                    s.complete_hardware(job.job_id, energy, dt, now)
                else:
                    s.complete_model(job.job_id, now)
            elif op < 0.90:
                peer = peers[int(rng.integers(len(peers)))]
                if peer.state is PeerState.OFFLINE:
                    s.heartbeat(peer.peer_id, now)
                else:
                    s.offline(peer.peer_id, now)
            elif op < 0.93:
                s.snapshot("periodic")
            else:
                # results for jobs that are not running must be rejected
                if s.jobs:
                    jid = str(rng.choice(list(s.jobs)))
                    s.complete_hardware(jid, 1.0, 1.0, now)
        except SchedulerError:
            pass
    s.snapshot("final")
    return s
