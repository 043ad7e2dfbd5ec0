"""Desk-scale device farm: hidden power models, synthetic apps, peer churn, RQ experiments.

The simulator drives a :class:`~emaas.scheduler.Scheduler` on an integer tick
clock. Each tick processes, in order: results due this tick, super-provider
availability changes, then new job arrivals. Randomness comes from named
substreams of one master seed so changing one knob leaves the others alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import (
    ApiVocabulary,
    AppManifest,
    ContractError,
    ExecutionContext,
    InstrumentedTest,
    SchemaError,
    estimate_power,
)
from .events import EventKind, PersistedEvent
from .rng import Streams
from .scheduler import Action, JobState, Role, Scheduler, SchedulerConfig

# Spacing of the square wave used for the OOD nonlinearity. Large enough that
# the wave has no usable linear trend over the feature simplex.
_OOD_WAVE_FREQ = 997.0


@dataclass(frozen=True)
class GroundTruthPowerModel:
    """Hidden power of one device model.

    Mean power is ``w_star . [1, x]`` plus, for apps touching the OOD APIs or
    unknown APIs, ``ood_penalty * ood_mass(x)`` scaled by 0 or 2 according to a
    high-frequency square wave over the features. The penalty averages to
    ``ood_penalty`` per unit mass, but its app-to-app variation has no affine
    structure, so a linear learner keeps an error of about ``ood_penalty``.
    """

    device_model: str
    w_star: np.ndarray
    ood_indices: tuple[int, ...]
    ood_penalty: float
    noise_sigma: float
    wave: np.ndarray

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")

    def ood_mass(self, x: np.ndarray) -> float:
        # OOV mass is the last feature
        return float(x[list(self.ood_indices)].sum() + x[-1])

    def mean_power(self, x: np.ndarray) -> float:
        base = float(self.w_star[0] + self.w_star[1:] @ x)
        mass = self.ood_mass(x)
        if mass == 0.0:
            return base
        phase = (_OOD_WAVE_FREQ * float(self.wave @ x)) % 1.0
        return base + self.ood_penalty * mass * (2.0 if phase < 0.5 else 0.0)


def build_ground_truth(
    device_model: str,
    vocab: ApiVocabulary,
    cx_names: Sequence[str],
    ood_api_set: Sequence[str],
    rng: np.random.Generator,
    ood_penalty: float = 1.0,
    noise_sigma: float = 0.05,
    w_star: Sequence[float] | None = None,
) -> GroundTruthPowerModel:
    d = len(vocab) + len(cx_names) + 1
    if w_star is None:
        w = np.empty(d + 1)
        w[0] = rng.uniform(0.3, 0.6)
        w[1:len(vocab) + 1] = rng.uniform(0.5, 2.0, size=len(vocab))
        w[len(vocab) + 1:-1] = rng.uniform(0.0, 0.05, size=len(cx_names))
        w[-1] = rng.uniform(0.5, 2.0)
    else:
        w = np.asarray(w_star, dtype=float)
        if w.shape != (d + 1,):
            raise ContractError(f"w_star must have {d + 1} entries")
    wave = rng.normal(size=d)
    ood_indices = tuple(vocab.index(name) for name in ood_api_set)
    return GroundTruthPowerModel(device_model, w, ood_indices, ood_penalty, noise_sigma, wave)


def simulate_hardware(
    gt: GroundTruthPowerModel, x: np.ndarray, delta_t: float, rng: np.random.Generator
) -> float:
    """Energy (J) a power monitor would report for one run of ``delta_t`` seconds."""
    if not delta_t > 0:
        raise ContractError("delta_t must be positive")
    noise = rng.normal(0.0, gt.noise_sigma) if gt.noise_sigma > 0 else 0.0
    return max(0.0, gt.mean_power(x) + noise) * delta_t


@dataclass
class AppGenerator:
    vocab: ApiVocabulary
    ood_api_set: tuple[str, ...] = ()
    oov_apis: tuple[str, ...] = ()
    zipf_s: float = 1.2
    calls_range: tuple[int, int] = (50, 500)
    apis_per_app: tuple[int, int] = (3, 8)
    cx_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    ood_fraction: float = 0.2
    duration_range: tuple[float, float] = (5.0, 60.0)

    def __post_init__(self):
        if not 0.0 <= self.ood_fraction <= 1.0:
            raise ContractError("ood_fraction must be in [0, 1]")
        unknown = [a for a in self.ood_api_set if a not in self.vocab]
        if unknown:
            raise ContractError(f"ood_api_set entries not in vocabulary: {unknown}")
        if any(a in self.vocab for a in self.oov_apis):
            raise ContractError("oov_apis must lie outside the vocabulary")
        ood = set(self.ood_api_set)
        self._in_dist = tuple(a for a in self.vocab.entries if a not in ood)
        self._ood_pool = tuple(self.ood_api_set) + tuple(self.oov_apis)
        if self.ood_fraction > 0 and not self._ood_pool:
            raise ContractError("ood_fraction > 0 needs a non-empty ood_api_set or oov_apis")
        if self.ood_fraction < 1 and not self._in_dist:
            raise ContractError("no in-distribution APIs left in the vocabulary")

    def generate(self, rng: np.random.Generator, app_id: str) -> tuple[AppManifest, bool]:
        """Returns the manifest and whether it was drawn as an OOD app."""
        is_ood = bool(rng.random() < self.ood_fraction)
        pool = self._ood_pool if is_ood else self._in_dist
        lo, hi = self.apis_per_app
        k = int(min(len(pool), rng.integers(lo, hi + 1)))
        apis = rng.choice(len(pool), size=k, replace=False)
        weights = 1.0 / np.arange(1, k + 1) ** self.zipf_s
        total = int(rng.integers(self.calls_range[0], self.calls_range[1] + 1))
        counts = rng.multinomial(total, weights / weights.sum())
        api_calls = {pool[i]: int(c) for i, c in zip(apis, counts) if c > 0}
        complexity = {
            name: float(rng.uniform(a, b)) for name, (a, b) in sorted(self.cx_ranges.items())
        }
        duration = float(rng.uniform(*self.duration_range))
        manifest = AppManifest(app_id, api_calls, complexity,
                               (InstrumentedTest(f"{app_id}/test-0", duration),))
        return manifest, is_ood


def generate_app(gen: AppGenerator, rng: np.random.Generator, app_id: str = "app") -> AppManifest:
    return gen.generate(rng, app_id)[0]


@dataclass
class BusyCycle:
    """Super-providers idle for a tick go away with ``away_prob``; away spells are geometric."""

    away_prob: float = 0.05
    away_mean: float = 20.0


@dataclass
class DeviceSpec:
    device_model: str
    n_providers: int = 3
    n_super_providers: int = 1
    ood_penalty: float = 1.0
    noise_sigma: float = 0.05
    w_star: list[float] | None = None


def _default_devices() -> list[DeviceSpec]:
    return [DeviceSpec("device-X"), DeviceSpec("device-Y")]


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration_events: int = 5000
    devices: list[DeviceSpec] = field(default_factory=_default_devices)
    arrival_rate: float = 0.5
    busy_cycle: BusyCycle = field(default_factory=BusyCycle)
    theta: float = 0.25
    n_min: int = 30
    lam: float = 0.999
    p0: float = 1e6
    max_wait: int | None = 1000
    tick_seconds: float = 5.0
    d_api: int = 32
    n_ood_apis: int = 6
    n_oov_apis: int = 4
    cx_ranges: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"cyclomatic_mean": (1.0, 3.0), "method_count_k": (0.5, 1.5)}
    )
    zipf_s: float = 1.2
    calls_range: tuple[int, int] = (50, 500)
    ood_fraction: float = 0.2
    window: int = 250
    rq1_warmup: int = 300

    def validate(self) -> None:
        if not self.devices:
            raise SchemaError("devices", "at least one device is required")
        for i, dev in enumerate(self.devices):
            if not dev.device_model:
                raise SchemaError(f"devices[{i}].device_model", "must be non-empty")
            if dev.n_providers < 0 or dev.n_super_providers < 0:
                raise SchemaError(f"devices[{i}]", "peer counts must be non-negative")
            if dev.noise_sigma < 0:
                raise SchemaError(f"devices[{i}].noise_sigma", "must be non-negative")
        names = [d.device_model for d in self.devices]
        if len(set(names)) != len(names):
            raise SchemaError("devices", "device models must be unique")
        checks = [
            ("duration_events", self.duration_events >= 1),
            ("arrival_rate", self.arrival_rate >= 0),
            ("theta", self.theta > 0),
            ("n_min", self.n_min >= 1),
            ("lam", 0 < self.lam <= 1),
            ("p0", self.p0 > 0),
            ("tick_seconds", self.tick_seconds > 0),
            ("d_api", self.d_api >= 1),
            ("n_ood_apis", 0 <= self.n_ood_apis < self.d_api),
            ("n_oov_apis", self.n_oov_apis >= 0),
            ("ood_fraction", 0 <= self.ood_fraction <= 1),
            ("window", self.window >= 1),
            ("rq1_warmup", self.rq1_warmup >= 0),
            ("busy_cycle.away_prob", 0 <= self.busy_cycle.away_prob <= 1),
            ("busy_cycle.away_mean", self.busy_cycle.away_mean >= 1),
            ("calls_range", 1 <= self.calls_range[0] <= self.calls_range[1]),
            ("max_wait", self.max_wait is None or self.max_wait >= 0),
        ]
        for path, ok in checks:
            if not ok:
                raise SchemaError(path, "out of range")
        if self.ood_fraction > 0 and self.n_ood_apis + self.n_oov_apis == 0:
            raise SchemaError("ood_fraction", "needs OOD or OOV APIs")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["cx_ranges"] = {k: list(v) for k, v in self.cx_ranges.items()}
        doc["calls_range"] = list(self.calls_range)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise SchemaError("$", "scenario must be an object")
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(doc) - known)
        if extra:
            raise SchemaError(extra[0], "unknown field")
        kwargs: dict[str, Any] = dict(doc)
        try:
            if "devices" in doc:
                if not isinstance(doc["devices"], list):
                    raise SchemaError("devices", "must be a list")
                kwargs["devices"] = [DeviceSpec(**d) for d in doc["devices"]]
            if "busy_cycle" in doc:
                kwargs["busy_cycle"] = BusyCycle(**doc["busy_cycle"])
            if "cx_ranges" in doc:
                kwargs["cx_ranges"] = {k: tuple(v) for k, v in doc["cx_ranges"].items()}
            if "calls_range" in doc:
                kwargs["calls_range"] = tuple(doc["calls_range"])
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise SchemaError("$", str(exc)) from None
        cfg.validate()
        return cfg

    def vocabulary(self) -> ApiVocabulary:
        return ApiVocabulary(tuple(f"api.{i:02d}" for i in range(self.d_api)))

    def cx_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.cx_ranges))

    def ood_api_set(self) -> tuple[str, ...]:
        # the last n_ood_apis vocabulary entries
        entries = self.vocabulary().entries
        return entries[len(entries) - self.n_ood_apis:] if self.n_ood_apis else ()

    def oov_apis(self) -> tuple[str, ...]:
        return tuple(f"ext.{i:02d}" for i in range(self.n_oov_apis))

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(self.vocabulary(), self.cx_names(), self.theta, self.n_min,
                               self.lam, self.p0, self.max_wait)

    def app_generator(self) -> AppGenerator:
        return AppGenerator(self.vocabulary(), self.ood_api_set(), self.oov_apis(),
                            zipf_s=self.zipf_s, calls_range=self.calls_range,
                            cx_ranges=dict(self.cx_ranges), ood_fraction=self.ood_fraction)


@dataclass
class ExperimentReport:
    config: dict
    summary: dict
    rq1: dict
    rq2: dict
    rq3: dict
    final_models: dict
    events: list[PersistedEvent] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "summary": self.summary,
            "rq1": self.rq1,
            "rq2": self.rq2,
            "rq3": self.rq3,
            "final_models": self.final_models,
        }


def _fraction(num: int, den: int) -> float | None:
    return num / den if den else None


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


@dataclass
class _JobInfo:
    is_ood: bool
    true_power: float
    dt: float
    first_gate: bool | None = None
    first_n_r: int = 0


def run_scenario(cfg: ScenarioConfig) -> ExperimentReport:
    cfg.validate()
    streams = Streams(cfg.seed)
    vocab, cx_names = cfg.vocabulary(), cfg.cx_names()
    sched = Scheduler(cfg.scheduler_config())
    gen = cfg.app_generator()
    truths = {
        dev.device_model: build_ground_truth(
            dev.device_model, vocab, cx_names, cfg.ood_api_set(),
            streams[f"truth/{dev.device_model}"], dev.ood_penalty, dev.noise_sigma, dev.w_star)
        for dev in cfg.devices
    }
    device_names = [dev.device_model for dev in cfg.devices]

    super_peers: list[str] = []
    for dev in cfg.devices:
        for i in range(dev.n_super_providers):
            pid = f"{dev.device_model}/sp-{i}"
            sched.register_peer(pid, Role.SUPER_PROVIDER, dev.device_model, 0)
            super_peers.append(pid)
        for i in range(dev.n_providers):
            sched.register_peer(f"{dev.device_model}/p-{i}", Role.PROVIDER, dev.device_model, 0)

    info: dict[str, _JobInfo] = {}
    due: dict[int, list[str]] = {}
    away_until: dict[str, int] = {}
    cursor = len(sched.log)
    completions: list[tuple[int, str]] = []  # (tick, job_id)
    sw_power: dict[str, float] = {}
    gate_at_submit: dict[str, tuple[bool, int]] = {}

    def collect(now: int) -> None:
        # schedule results for assignments made since the last call
        nonlocal cursor
        for event in sched.log.events[cursor:]:
            p = event.payload
            if event.kind is EventKind.JOB_SUBMITTED and p.get("resubmission_of"):
                info[p["job_id"]] = info[p["resubmission_of"]]
            if event.kind is not EventKind.DECISION:
                continue
            if p["action"] == Action.ASSIGN_HARDWARE.value:
                dt = info[p["job_id"]].dt
                due.setdefault(now + max(1, math.ceil(dt / cfg.tick_seconds)), []).append(p["job_id"])
            elif p["action"] == Action.ASSIGN_MODEL.value:
                due.setdefault(now + 1, []).append(p["job_id"])
        cursor = len(sched.log)

    arrivals = streams["arrivals"]
    appgen = streams["app-gen"]
    churn = streams["busy-cycles"]
    for now in range(cfg.duration_events):
        for job_id in sorted(due.pop(now, [])):
            job = sched.jobs[job_id]
            if job.state is not JobState.RUNNING:
                continue
            em = sched.registry.energy_models[job.device_model]
            sw_power[job_id] = estimate_power(em, job.features)
            if job.route.value == "hardware":
                energy = simulate_hardware(truths[job.device_model], job.features,
                                           info[job_id].dt, streams.fresh(f"noise/{job_id}"))
                sched.complete_hardware(job_id, energy, info[job_id].dt, now)
            else:
                sched.complete_model(job_id, now)
            if job.state is JobState.COMPLETED:
                completions.append((now, job_id))
            collect(now)

        for pid in super_peers:
            peer = sched.registry.peers[pid]
            if pid in away_until:
                if away_until[pid] <= now:
                    del away_until[pid]
                    sched.heartbeat(pid, now)
                    collect(now)
            elif peer.state.value == "idle" and churn.random() < cfg.busy_cycle.away_prob:
                away_until[pid] = now + int(churn.geometric(1.0 / cfg.busy_cycle.away_mean))
                sched.offline(pid, now)
                collect(now)

        for _ in range(int(arrivals.poisson(cfg.arrival_rate))):
            device = device_names[int(arrivals.integers(len(device_names)))]
            n = len(info)
            manifest, is_ood = gen.generate(appgen, f"app-{n:06d}")
            x = sched.features(manifest)
            true_power = truths[device].mean_power(x)
            if true_power < 0:
                continue
            job_id = f"job-{n + 1:06d}"
            info[job_id] = _JobInfo(is_ood, true_power, manifest.suite_duration_s)
            job = sched.submit(manifest, ExecutionContext(device), now, job_id=job_id)
            d0 = job.decisions[0]
            gate_at_submit[job_id] = (bool(d0["reliable"]), int(d0["n_r"]))
            collect(now)

    sched.snapshot("final")
    return _build_report(cfg, sched, info, completions, sw_power, gate_at_submit)


def _build_report(cfg, sched, info, completions, sw_power, gate_at_submit) -> ExperimentReport:
    T = cfg.duration_events
    n_windows = math.ceil(T / cfg.window)
    hw = [0] * n_windows
    tot = [0] * n_windows
    hyb_err: list[float] = []
    sw_err: list[float] = []
    final_window_err: list[float] = []
    q1 = [0, 0]
    q4 = [0, 0]
    for tick, job_id in completions:
        rec = sched.jobs[job_id].record
        is_hw = rec.source.value == "hardware"
        w = tick // cfg.window
        hw[w] += is_hw
        tot[w] += 1
        if tick < T / 4:
            q1[0] += is_hw
            q1[1] += 1
        if tick >= 3 * T / 4:
            q4[0] += is_hw
            q4[1] += 1
        truth = info[job_id].true_power
        e_h = abs(rec.energy_j / rec.delta_t - truth)
        hyb_err.append(e_h)
        sw_err.append(abs(sw_power[job_id] - truth))
        if w == n_windows - 1:
            final_window_err.append(e_h)

    hybrid_mae = _mean(hyb_err)
    sw_mae = _mean(sw_err)
    rq2 = {
        "n_jobs": len(hyb_err),
        "hybrid_mae": hybrid_mae,
        "software_only_mae": sw_mae,
        "improvement": None if hybrid_mae is None else sw_mae - hybrid_mae,
        "final_window_hybrid_mae": _mean(final_window_err),
    }

    rq3 = {
        "window": cfg.window,
        "hardware_fraction": [_fraction(h, t) for h, t in zip(hw, tot)],
        "completed": tot,
        "first_quarter": _fraction(*q1),
        "final_quarter": _fraction(*q4),
    }

    confusion = {"ood": {"hardware": 0, "model": 0}, "in_distribution": {"hardware": 0, "model": 0}}
    for job_id, (reliable, n_r) in gate_at_submit.items():
        if n_r < cfg.rq1_warmup:
            continue
        label = "ood" if info[job_id].is_ood else "in_distribution"
        confusion[label]["model" if reliable else "hardware"] += 1
    rq1 = {
        "warmup": cfg.rq1_warmup,
        "confusion": confusion,
        "ood_to_hardware": _fraction(confusion["ood"]["hardware"], sum(confusion["ood"].values())),
        "in_distribution_to_hardware": _fraction(
            confusion["in_distribution"]["hardware"], sum(confusion["in_distribution"].values())),
    }

    states: dict[str, int] = {}
    reasons: dict[str, int] = {}
    for job in sched.jobs.values():
        states[job.state.value] = states.get(job.state.value, 0) + 1
        if job.reason:
            reasons[job.reason] = reasons.get(job.reason, 0) + 1
    n_hw = sum(hw)
    summary = {
        "jobs": len(sched.jobs),
        "states": dict(sorted(states.items())),
        "failure_reasons": dict(sorted(reasons.items())),
        "hardware_completions": n_hw,
        "model_completions": sum(tot) - n_hw,
        "hardware_fraction": _fraction(n_hw, sum(tot)),
        "events": len(sched.log),
    }
    final_models = {
        device: {
            "energy_n": em.n,
            "energy_w": em.w.tolist(),
            "reliability_n": sched.registry.reliability_models[device].n,
            "reliability_v": sched.registry.reliability_models[device].v.tolist(),
        }
        for device, em in sorted(sched.registry.energy_models.items())
    }
    return ExperimentReport(cfg.to_dict(), summary, rq1, rq2, rq3, final_models,
                            list(sched.log.events))
