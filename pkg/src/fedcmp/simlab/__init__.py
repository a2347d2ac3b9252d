"""Simulation scenarios, truth oracle and replication harness."""

from .scenarios import ScenarioSpec, gen_scenario, true_value, true_value_oracle
from .study import MetricsRow, plot_metrics, run_replicate, run_study, write_metrics_csv

__all__ = [
    "MetricsRow",
    "ScenarioSpec",
    "gen_scenario",
    "plot_metrics",
    "run_replicate",
    "run_study",
    "true_value",
    "true_value_oracle",
    "write_metrics_csv",
]
