"""Energy estimation math: features, power error, online models and the reliability gate.

Everything here is a pure function over explicit state. Model updates return a
new model instance and never touch the one passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

DEFAULT_LAMBDA = 0.999
DEFAULT_THETA = 0.25
DEFAULT_N_MIN = 30
DEFAULT_P0 = 1e6

SCHEMA_VERSION = 1


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class SchemaError(ValueError):
    """A JSON document failed validation; ``path`` points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class ApiVocabulary:
    entries: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ContractError("vocabulary must not be empty")
        if len(set(entries)) != len(entries):
            raise ContractError("vocabulary identifiers must be unique")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(entries)})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        return self._index[name]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "entries": list(self.entries)}

    @classmethod
    def from_dict(cls, doc: Any) -> "ApiVocabulary":
        if isinstance(doc, list):
            doc = {"entries": doc}
        if not isinstance(doc, dict):
            raise SchemaError("$", "vocabulary must be an object or a list")
        entries = doc.get("entries")
        if not isinstance(entries, list) or not entries:
            raise SchemaError("entries", "must be a non-empty list")
        for i, name in enumerate(entries):
            if not isinstance(name, str) or not name:
                raise SchemaError(f"entries[{i}]", "must be a non-empty string")
        if len(set(entries)) != len(entries):
            raise SchemaError("entries", "identifiers must be unique")
        return cls(tuple(entries))


@dataclass(frozen=True)
class InstrumentedTest:
    test_id: str
    nominal_duration_s: float


@dataclass(frozen=True)
class AppManifest:
    """Static-analysis summary of an app build plus its instrumentation tests."""

    app_id: str
    api_calls: Mapping[str, int]
    complexity: Mapping[str, float]
    tests: tuple[InstrumentedTest, ...]

    @property
    def suite_duration_s(self) -> float:
        return float(sum(t.nominal_duration_s for t in self.tests))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "app_id": self.app_id,
            "api_calls": dict(self.api_calls),
            "complexity": dict(self.complexity),
            "tests": [
                {"test_id": t.test_id, "nominal_duration_s": t.nominal_duration_s}
                for t in self.tests
            ],
        }

    @classmethod
    def from_dict(cls, doc: Any) -> "AppManifest":
        if not isinstance(doc, dict):
            raise SchemaError("$", "manifest must be an object")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise SchemaError("schema_version", f"unsupported version {version!r}")
        app_id = doc.get("app_id")
        if not isinstance(app_id, str) or not app_id:
            raise SchemaError("app_id", "must be a non-empty string")

        api_calls = doc.get("api_calls", {})
        if not isinstance(api_calls, dict):
            raise SchemaError("api_calls", "must be an object")
        for name, count in api_calls.items():
            if not isinstance(count, int) or isinstance(count, bool) or count < 0:
                raise SchemaError(f"api_calls.{name}", "must be a non-negative integer")

        complexity = doc.get("complexity", {})
        if not isinstance(complexity, dict):
            raise SchemaError("complexity", "must be an object")
        for name, value in complexity.items():
            if not _is_number(value) or not math.isfinite(value):
                raise SchemaError(f"complexity.{name}", "must be a finite number")

        tests = doc.get("tests")
        if not isinstance(tests, list) or not tests:
            raise SchemaError("tests", "must be a non-empty list")
        parsed = []
        for i, t in enumerate(tests):
            if not isinstance(t, dict):
                raise SchemaError(f"tests[{i}]", "must be an object")
            test_id = t.get("test_id")
            if not isinstance(test_id, str) or not test_id:
                raise SchemaError(f"tests[{i}].test_id", "must be a non-empty string")
            dur = t.get("nominal_duration_s")
            if not _is_number(dur) or not math.isfinite(dur) or dur <= 0:
                raise SchemaError(f"tests[{i}].nominal_duration_s", "must be a positive number")
            parsed.append(InstrumentedTest(test_id, float(dur)))

        return cls(
            app_id=app_id,
            api_calls=dict(api_calls),
            complexity={k: float(v) for k, v in complexity.items()},
            tests=tuple(parsed),
        )


@dataclass(frozen=True)
class ExecutionContext:
    device_model: str
    os_version: str = ""
    api_level: int = 0
    framework: str = ""

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "device_model": self.device_model,
            "os_version": self.os_version,
            "api_level": self.api_level,
            "framework": self.framework,
        }

    @classmethod
    def from_dict(cls, doc: Any) -> "ExecutionContext":
        if not isinstance(doc, dict):
            raise SchemaError("$", "context must be an object")
        device = doc.get("device_model")
        if not isinstance(device, str) or not device:
            raise SchemaError("device_model", "must be a non-empty string")
        os_version = doc.get("os_version", "")
        if not isinstance(os_version, str):
            raise SchemaError("os_version", "must be a string")
        api_level = doc.get("api_level", 0)
        if not isinstance(api_level, int) or isinstance(api_level, bool):
            raise SchemaError("api_level", "must be an integer")
        framework = doc.get("framework", "")
        if not isinstance(framework, str):
            raise SchemaError("framework", "must be a string")
        return cls(device, os_version, api_level, framework)


def feature_dim(vocab: ApiVocabulary, cx_names: Sequence[str]) -> int:
    return len(vocab) + len(cx_names) + 1


def extract_features(
    manifest: AppManifest, vocab: ApiVocabulary, cx_names: Sequence[str]
) -> np.ndarray:
    """Layout: ``[API-call frequencies | complexity metrics | OOV mass]``.

    Frequencies are counts over the manifest's total call count. Calls to
    identifiers outside the vocabulary land in the OOV mass. An app with no
    calls gets an all-zero API block and zero OOV mass.
    """
    d_api = len(vocab)
    x = np.zeros(d_api + len(cx_names) + 1)
    total = sum(manifest.api_calls.values())
    if total > 0:
        oov = 0
        for name, count in manifest.api_calls.items():
            if name in vocab:
                x[vocab.index(name)] += count / total
            else:
                oov += count
        x[-1] = oov / total
    for j, name in enumerate(cx_names):
        x[d_api + j] = manifest.complexity.get(name, 0.0)
    return x


def _regressor(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != dim:
        raise ContractError(f"feature dimension {x.shape} does not match model dimension {dim}")
    return np.concatenate(([1.0], x))


def _rls_step(
    w: np.ndarray, P: np.ndarray, phi: np.ndarray, y: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    Pphi = P @ phi
    gain = Pphi / (lam + phi @ Pphi)
    w_new = w + gain * (y - w @ phi)
    P_new = (P - np.outer(gain, Pphi)) / lam
    P_new = 0.5 * (P_new + P_new.T)
    return w_new, P_new


@dataclass(frozen=True)
class EnergyModel:
    """Affine mean-power regressor over ``[1, x]``, trained by recursive least squares."""

    device_model: str
    w: np.ndarray
    P: np.ndarray
    n: int = 0
    lam: float = DEFAULT_LAMBDA

    @classmethod
    def fresh(
        cls, device_model: str, dim: int, lam: float = DEFAULT_LAMBDA, p0: float = DEFAULT_P0
    ) -> "EnergyModel":
        if not 0 < lam <= 1:
            raise ContractError("forgetting factor must be in (0, 1]")
        return cls(device_model, np.zeros(dim + 1), p0 * np.eye(dim + 1), 0, lam)

    @property
    def dim(self) -> int:
        return self.w.shape[0] - 1

    def to_dict(self) -> dict:
        return {
            "device_model": self.device_model,
            "w": self.w.tolist(),
            "P": self.P.tolist(),
            "n": self.n,
            "lambda": self.lam,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergyModel":
        return cls(doc["device_model"], np.array(doc["w"], dtype=float),
                   np.array(doc["P"], dtype=float), int(doc["n"]), float(doc["lambda"]))


@dataclass(frozen=True)
class ReliabilityModel:
    """Predicts the absolute power error of the energy model; carries the gate threshold."""

    device_model: str
    v: np.ndarray
    P: np.ndarray
    n: int = 0
    theta: float = DEFAULT_THETA
    n_min: int = DEFAULT_N_MIN
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.theta > 0:
            raise ContractError("theta must be positive")
        if self.n_min < 1:
            raise ContractError("n_min must be at least 1")

    @classmethod
    def fresh(
        cls,
        device_model: str,
        dim: int,
        theta: float = DEFAULT_THETA,
        n_min: int = DEFAULT_N_MIN,
        lam: float = DEFAULT_LAMBDA,
        p0: float = DEFAULT_P0,
    ) -> "ReliabilityModel":
        if not 0 < lam <= 1:
            raise ContractError("forgetting factor must be in (0, 1]")
        return cls(device_model, np.zeros(dim + 1), p0 * np.eye(dim + 1), 0, theta, n_min, lam)

    @property
    def dim(self) -> int:
        return self.v.shape[0] - 1

    def to_dict(self) -> dict:
        return {
            "device_model": self.device_model,
            "v": self.v.tolist(),
            "P": self.P.tolist(),
            "n": self.n,
            "theta": self.theta,
            "n_min": self.n_min,
            "lambda": self.lam,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReliabilityModel":
        return cls(doc["device_model"], np.array(doc["v"], dtype=float),
                   np.array(doc["P"], dtype=float), int(doc["n"]), float(doc["theta"]),
                   int(doc["n_min"]), float(doc["lambda"]))


def estimate_power(model: EnergyModel, x: np.ndarray) -> float:
    phi = _regressor(x, model.dim)
    return max(0.0, float(model.w @ phi))


def estimate_energy(model: EnergyModel, x: np.ndarray, delta_t: float) -> float:
    if not delta_t > 0:
        raise ContractError("delta_t must be positive")
    return estimate_power(model, x) * delta_t


def power_error(e_measured: float, e_estimated: float, delta_t: float) -> float:
    """Signed power error in watts: (measured - estimated) / duration."""
    if not delta_t > 0:
        raise ContractError("delta_t must be positive")
    return (e_measured - e_estimated) / delta_t


def _require_finite(**values: Any) -> None:
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ContractError(f"{name} must be finite")


def update_energy_model(
    model: EnergyModel, x: np.ndarray, e_measured: float, delta_t: float
) -> EnergyModel:
    _require_finite(x=x, e_measured=e_measured, delta_t=delta_t)
    if not delta_t > 0:
        raise ContractError("delta_t must be positive")
    phi = _regressor(x, model.dim)
    w, P = _rls_step(model.w, model.P, phi, e_measured / delta_t, model.lam)
    return replace(model, w=w, P=P, n=model.n + 1)


def update_reliability_model(rc: ReliabilityModel, x: np.ndarray, epsilon: float) -> ReliabilityModel:
    _require_finite(x=x, epsilon=epsilon)
    phi = _regressor(x, rc.dim)
    v, P = _rls_step(rc.v, rc.P, phi, abs(epsilon), rc.lam)
    return replace(rc, v=v, P=P, n=rc.n + 1)


def predict_abs_error(rc: ReliabilityModel, x: np.ndarray) -> float:
    phi = _regressor(x, rc.dim)
    return max(0.0, float(rc.v @ phi))


def is_reliable(rc: ReliabilityModel, x: np.ndarray) -> bool:
    # threshold comparison is inclusive
    return rc.n >= rc.n_min and predict_abs_error(rc, x) <= rc.theta


class Source(str, Enum):
    HARDWARE = "hardware"
    MODEL = "model"


@dataclass(frozen=True)
class MeasurementRecord:
    job_id: str
    energy_j: float
    delta_t: float
    source: Source
    timestamp: int
    epsilon: float | None = None

    def __post_init__(self):
        if not self.energy_j >= 0:
            raise ContractError("energy must be non-negative")
        if not self.delta_t > 0:
            raise ContractError("delta_t must be positive")
        if self.epsilon is not None and self.source is not Source.HARDWARE:
            raise ContractError("epsilon is only defined for hardware measurements")

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "job_id": self.job_id,
            "energy_j": self.energy_j,
            "delta_t": self.delta_t,
            "source": self.source.value,
            "timestamp": self.timestamp,
        }
        if self.epsilon is not None:
            doc["epsilon"] = self.epsilon
        return doc
