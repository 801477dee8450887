"""Decentralized sample-based learning simulator (MoDeST) with FedAvg and D-SGD baselines."""
from .membership import ActivityTable, EventKind, Registry, View, initial_view, merge_view
from .protocol import ModestNode, ProtocolConfig, round_transfer_count
from .sampling import rank_candidates, rank_digest, sample_all_live
from .scenario import ConfigError, ScenarioConfig, ScenarioResult, run_scenario
from .simnet import ComputeTimeModel, FaultAction, FaultSchedule, LatencyModel, Simulator

__version__ = "0.1.0"

__all__ = [
    "ActivityTable", "ComputeTimeModel", "ConfigError", "EventKind", "FaultAction", "FaultSchedule",
    "LatencyModel", "ModestNode", "ProtocolConfig", "Registry", "ScenarioConfig", "ScenarioResult",
    "Simulator", "View", "initial_view", "merge_view", "rank_candidates", "rank_digest",
    "round_transfer_count", "run_scenario", "sample_all_live",
]
