"""Server-side aggregation: staleness-weighted async updates, the synchronous
FedAvg baseline, and the local-iteration assignment policies.

`async_aggregate` is pure (state in, state out); callers that receive updates
concurrently must serialize calls, which both the simulator and the network
server do.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .core import (
    ClientUpdate,
    ConfigError,
    GlobalState,
    Hyperparams,
    ParamVector,
    ProtocolViolationError,
    StalenessWarning,
    mix,
    staleness_weight,
)

__all__ = [
    "AggregationRecord",
    "async_aggregate",
    "sync_round",
    "FixedIterations",
    "UniformIterations",
    "TableIterations",
    "IterationPolicy",
    "assign_local_iterations",
]


@dataclass(frozen=True)
class AggregationRecord:
    """Bookkeeping for one aggregation event."""

    t_after: int
    client_id: str
    staleness: int
    beta_t: float
    global_loss_after: Optional[float] = None
    timestamp: Optional[float] = None


def async_aggregate(
    state: GlobalState,
    update: ClientUpdate,
    hp: Hyperparams,
    timestamp: Optional[float] = None,
) -> tuple[GlobalState, AggregationRecord]:
    """Fold one client update into the global model.

    The mixing weight is ``beta`` shrunk by the update's staleness
    ``state.t - update.tau`` (measured before this aggregation increments the
    epoch).  Stale updates are never dropped; exceeding the assumed staleness
    bound only emits a `StalenessWarning`.
    """
    if update.tau > state.t:
        raise ProtocolViolationError(
            f"client {update.client_id!r} sent tau={update.tau} > server epoch {state.t}"
        )
    stale = state.t - update.tau
    beta_t = staleness_weight(hp.beta, hp.a, state.t, update.tau)
    if stale > hp.k_bound:
        warnings.warn(
            f"staleness {stale} exceeds assumed bound {hp.k_bound} "
            f"(client {update.client_id!r} at epoch {state.t})",
            StalenessWarning,
            stacklevel=2,
        )
    new_state = GlobalState(
        w=mix(state.w, update.w_new, beta_t),
        t=state.t + 1,
        max_staleness_seen=max(state.max_staleness_seen, stale),
        aggregations=state.aggregations + 1,
    )
    record = AggregationRecord(
        t_after=new_state.t,
        client_id=update.client_id,
        staleness=stale,
        beta_t=beta_t,
        timestamp=timestamp,
    )
    return new_state, record


def sync_round(
    state: GlobalState,
    updates: Sequence[ClientUpdate],
    shard_sizes: Mapping[str, int],
) -> GlobalState:
    """One synchronous FedAvg round: sample-count-weighted average.

    Exactly one update per participating client is required, and every update
    must be fresh (``tau`` equal to the current epoch).
    """
    if not updates:
        raise ValueError("sync round needs at least one update")
    seen = [u.client_id for u in updates]
    if len(set(seen)) != len(seen):
        raise ProtocolViolationError(f"duplicate client update in sync round: {sorted(seen)}")
    extra = set(seen) - set(shard_sizes)
    if extra:
        raise ProtocolViolationError(f"sync round got unknown clients: {sorted(extra)}")
    missing = set(shard_sizes) - set(seen)
    if missing:
        raise ProtocolViolationError(f"sync round missing clients: {sorted(missing)}")
    for u in updates:
        if u.tau != state.t:
            raise ProtocolViolationError(
                f"stale update in sync mode: client {u.client_id!r} has tau={u.tau}, "
                f"round epoch is {state.t}"
            )
    total = float(sum(shard_sizes.values()))
    acc = np.zeros(state.w.dim)
    for u in updates:
        if u.w_new.dim != state.w.dim:
            raise ProtocolViolationError(
                f"client {u.client_id!r} sent dim {u.w_new.dim}, expected {state.w.dim}"
            )
        acc += (shard_sizes[u.client_id] / total) * u.w_new.values
    return GlobalState(
        w=ParamVector(acc),
        t=state.t + 1,
        max_staleness_seen=state.max_staleness_seen,
        aggregations=state.aggregations + 1,
    )


@dataclass(frozen=True)
class FixedIterations:
    """Every client always runs the same number of local iterations."""

    h: int


@dataclass
class UniformIterations:
    """Local-iteration counts drawn uniformly from [h_min, h_max] per dispatch."""

    rng: np.random.Generator


@dataclass(frozen=True)
class TableIterations:
    """Per-client iteration counts, e.g. matched to device capability."""

    table: Mapping[str, int]


IterationPolicy = Union[FixedIterations, UniformIterations, TableIterations]


def assign_local_iterations(policy: IterationPolicy, client_id: str, hp: Hyperparams) -> int:
    """Number of local iterations the server assigns for one dispatch."""
    if isinstance(policy, FixedIterations):
        h = policy.h
    elif isinstance(policy, UniformIterations):
        h = int(policy.rng.integers(hp.h_min, hp.h_max + 1))
    elif isinstance(policy, TableIterations):
        try:
            h = int(policy.table[client_id])
        except KeyError:
            raise ConfigError(f"iteration table has no entry for client {client_id!r}") from None
    else:
        raise ConfigError(f"unknown iteration policy {policy!r}")
    if not hp.h_min <= h <= hp.h_max:
        raise ConfigError(f"assigned h={h} outside [{hp.h_min}, {hp.h_max}]")
    return h
