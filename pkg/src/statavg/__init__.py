"""Federated learning with shared feature statistics (StatAvg) and FedAvg/FedLN/FedBN baselines."""

from .data import ClientPartition, DataError, LabeledDataset, SynthSpec
from .federation import StrategyConfig, run_federation
from .nn import ModelSpec
from .stats import GlobalStats, LocalStats, aggregate_stats, compute_local_stats, normalize

__version__ = "0.1.0"

__all__ = [
    "ClientPartition",
    "DataError",
    "GlobalStats",
    "LabeledDataset",
    "LocalStats",
    "ModelSpec",
    "StrategyConfig",
    "SynthSpec",
    "aggregate_stats",
    "compute_local_stats",
    "normalize",
    "run_federation",
]
