"""Asynchronous federated optimization with staleness-adaptive aggregation.

The package bundles the optimization core (staleness-weighted mixing,
anchored local SGD), a synchronous FedAvg baseline, a deterministic
discrete-event simulator of heterogeneous devices, a TCP runner for real
multi-process experiments, a staged knowledge-distillation pipeline, and
empirical probes of the convergence analysis' assumptions.
"""

from .core import (
    ClientUpdate,
    ConfigError,
    DimensionMismatchError,
    DivergenceError,
    FedAsyncError,
    GlobalState,
    Hyperparams,
    NonFiniteError,
    ParamVector,
    ProtocolViolationError,
    StalenessWarning,
    derive_rng,
    mix,
    staleness_weight,
)
from .models import Batch, ModelSpec
from .data import Dataset, Shard

__all__ = [
    "Batch",
    "ClientUpdate",
    "ConfigError",
    "Dataset",
    "DimensionMismatchError",
    "DivergenceError",
    "FedAsyncError",
    "GlobalState",
    "Hyperparams",
    "ModelSpec",
    "NonFiniteError",
    "ParamVector",
    "ProtocolViolationError",
    "Shard",
    "StalenessWarning",
    "derive_rng",
    "mix",
    "staleness_weight",
]

__version__ = "0.1.0"
