"""Hybrid energy-measurement brokering for mobile apps."""

from .core import (
    ApiVocabulary,
    AppManifest,
    EnergyModel,
    ExecutionContext,
    MeasurementRecord,
    ReliabilityModel,
    Source,
    estimate_energy,
    estimate_power,
    extract_features,
    is_reliable,
    power_error,
    predict_abs_error,
    update_energy_model,
    update_reliability_model,
)
from .scheduler import Role, Scheduler, SchedulerConfig
from .simulator import ScenarioConfig, run_scenario

__version__ = "0.1.0"

__all__ = [
    "ApiVocabulary",
    "AppManifest",
    "EnergyModel",
    "ExecutionContext",
    "MeasurementRecord",
    "ReliabilityModel",
    "Role",
    "ScenarioConfig",
    "Scheduler",
    "SchedulerConfig",
    "Source",
    "estimate_energy",
    "estimate_power",
    "extract_features",
    "is_reliable",
    "power_error",
    "predict_abs_error",
    "run_scenario",
    "update_energy_model",
    "update_reliability_model",
]
