"""Scenario runner, per-drone agent, metrics and CLI."""

from .agent import DroneAgent, ScanResult
from .metrics import compute_extrinsic_error, compute_rmse
from .runner import InvariantViolation, RunReport, run_scenario

__all__ = [
    "DroneAgent",
    "InvariantViolation",
    "RunReport",
    "ScanResult",
    "compute_extrinsic_error",
    "compute_rmse",
    "run_scenario",
]
