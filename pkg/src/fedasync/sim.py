"""Deterministic discrete-event simulation of heterogeneous clients.

The simulator drives the async protocol (and the synchronous baseline) over a
priority queue of client-finished events: every client starts training at
clock zero, and whenever a finish event fires the server aggregates, the
client re-fetches the fresh model, and a new finish event is scheduled.
Simulated time is fully decoupled from real time, so runs that report hours
of device time complete in milliseconds, and equal seeds give byte-identical
traces.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import models
from .client import ClientConfig, local_train
from .core import (
    ConfigError,
    DivergenceError,
    GlobalState,
    Hyperparams,
    ParamVector,
    STREAM_CLIENT,
    derive_rng,
)
from .data import Dataset, Shard, full_batch
from .models import GradientSample, ModelSpec
from .server import (
    IterationPolicy,
    assign_local_iterations,
    async_aggregate,
    sync_round,
)

__all__ = [
    "DeviceProfile",
    "load_device_profiles",
    "bundled_profile_path",
    "TraceRow",
    "ExperimentTrace",
    "SimConfig",
    "build_clients",
    "evaluate_global",
    "run_async",
    "run_sync",
    "run_replay",
    "compare_wallclock",
]

TRACE_COLUMNS = (
    "t",
    "wall_clock_s",
    "global_loss",
    "grad_norm_sq",
    "accuracy",
    "staleness",
    "beta_t",
    "client_id",
)


@dataclass(frozen=True)
class DeviceProfile:
    """Measured cost of one device class: seconds per local epoch plus link latencies."""

    name: str
    seconds_per_local_epoch: float
    uplink_latency_s: float = 0.0
    downlink_latency_s: float = 0.0

    def __post_init__(self) -> None:
        if not (self.seconds_per_local_epoch > 0 and math.isfinite(self.seconds_per_local_epoch)):
            raise ValueError(f"device {self.name!r}: compute time must be > 0")
        if self.uplink_latency_s < 0 or self.downlink_latency_s < 0:
            raise ValueError(f"device {self.name!r}: latencies must be >= 0")


_PROFILE_HEADER = "name,seconds_per_local_epoch,uplink_s,downlink_s"


def load_device_profiles(path) -> list[DeviceProfile]:
    """Read a device-profile CSV with header ``name,seconds_per_local_epoch,uplink_s,downlink_s``."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0].replace(" ", "") != _PROFILE_HEADER:
        raise ConfigError(f"{path}: first line must be '{_PROFILE_HEADER}'")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ConfigError(f"{path}: line {lineno}: expected 4 fields")
        try:
            out.append(
                DeviceProfile(parts[0], float(parts[1]), float(parts[2]), float(parts[3]))
            )
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from None
    if not out:
        raise ConfigError(f"{path}: no device rows")
    return out


def bundled_profile_path(name: str):
    """Path of a device-profile CSV shipped with the package (e.g. ``jetson_hmdb51``)."""
    from importlib import resources

    candidate = resources.files("fedasync").joinpath("profiles", f"{name}.csv")
    if not candidate.is_file():
        raise ConfigError(f"no bundled device profile named {name!r}")
    return candidate


@dataclass(frozen=True)
class TraceRow:
    """One aggregation event; metric fields are NaN when evaluation was skipped."""

    t: int
    wall_clock_s: float
    global_loss: float
    grad_norm_sq: float
    accuracy: float
    staleness: int
    beta_t: float
    client_id: str


@dataclass
class ExperimentTrace:
    """Per-aggregation records plus run-level summary accessors."""

    rows: list[TraceRow] = field(default_factory=list)
    diverged: bool = False
    notes: list[str] = field(default_factory=list)
    param_snapshots: Optional[list[ParamVector]] = None
    gradient_samples: Optional[list[GradientSample]] = None

    @property
    def total_wall_clock_s(self) -> float:
        return self.rows[-1].wall_clock_s if self.rows else 0.0

    @property
    def final_accuracy(self) -> float:
        evaluated = [r.accuracy for r in self.rows if not math.isnan(r.accuracy)]
        return evaluated[-1] if evaluated else math.nan

    @property
    def final_loss(self) -> float:
        evaluated = [r.global_loss for r in self.rows if not math.isnan(r.global_loss)]
        return evaluated[-1] if evaluated else math.nan

    @property
    def min_grad_norm_sq(self) -> float:
        evaluated = [r.grad_norm_sq for r in self.rows if not math.isnan(r.grad_norm_sq)]
        return min(evaluated) if evaluated else math.nan

    @property
    def max_staleness(self) -> int:
        return max((r.staleness for r in self.rows), default=0)

    def arrival_order(self) -> list[str]:
        return [r.client_id for r in self.rows]

    def summary(self) -> dict:
        return {
            "aggregations": len(self.rows),
            "total_wall_clock_s": self.total_wall_clock_s,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "min_grad_norm_sq": self.min_grad_norm_sq,
            "max_staleness": self.max_staleness,
            "diverged": self.diverged,
        }


@dataclass
class SimConfig:
    """Everything one simulated experiment needs.

    ``profiles`` are cycled over clients when fewer profiles than shards are
    given; with no profiles every client costs one second per local epoch.
    ``iterations_per_local_epoch`` maps iteration counts onto the per-epoch
    device times for wall-clock accounting.
    """

    spec: ModelSpec
    train: Dataset
    shards: Sequence[Shard]
    hp: Hyperparams
    policy: IterationPolicy
    w0: ParamVector
    eval_dataset: Optional[Dataset] = None
    profiles: Optional[Sequence[DeviceProfile]] = None
    eval_every: int = 1
    iterations_per_local_epoch: int = 1
    record_params: bool = False
    record_gradients: bool = False

    def __post_init__(self) -> None:
        if not self.shards:
            raise ConfigError("need at least one client shard")
        if self.w0.dim != models.param_dim(self.spec):
            raise ConfigError(
                f"initial weights have dim {self.w0.dim}, model needs {models.param_dim(self.spec)}"
            )
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.iterations_per_local_epoch < 1:
            raise ConfigError("iterations_per_local_epoch must be >= 1")

    @property
    def n_clients(self) -> int:
        return len(self.shards)


def build_clients(cfg: SimConfig) -> list[ClientConfig]:
    """Client configs with per-client generators derived from the experiment seed.

    The distributed runner uses the same derivation, so simulated and real
    clients draw identical batch sequences.
    """
    return [
        ClientConfig(
            client_id=shard.owner,
            dataset=cfg.train,
            shard=shard,
            spec=cfg.spec,
            hp=cfg.hp,
            rng=derive_rng(cfg.hp.seed, STREAM_CLIENT, i),
        )
        for i, shard in enumerate(cfg.shards)
    ]


def _client_profiles(cfg: SimConfig) -> list[DeviceProfile]:
    if not cfg.profiles:
        return [DeviceProfile("default", 1.0)] * len(cfg.shards)
    return [cfg.profiles[i % len(cfg.profiles)] for i in range(len(cfg.shards))]


def _round_time(profile: DeviceProfile, h: int, cfg: SimConfig) -> float:
    compute = h * profile.seconds_per_local_epoch / cfg.iterations_per_local_epoch
    return profile.downlink_latency_s + compute + profile.uplink_latency_s


def evaluate_global(cfg: SimConfig, w: ParamVector) -> tuple[float, float, float]:
    """Full-objective loss, squared gradient norm, and held-out top-1 accuracy.

    Values may be infinite when the model has drifted far enough that the
    objective overflows; that is reported as-is rather than raised.
    """
    fb = full_batch(cfg.train)
    with np.errstate(over="ignore"):
        loss = models.loss(cfg.spec, w, fb)
        g = models.grad(cfg.spec, w, fb).values
        grad_sq = float(g @ g)
    if cfg.spec.kind == "l2-linear-regression":
        acc = math.nan
    else:
        eval_ds = cfg.eval_dataset if cfg.eval_dataset is not None else cfg.train
        acc = models.accuracy(cfg.spec, w, full_batch(eval_ds))
    return loss, grad_sq, acc


def _metrics_for_row(cfg: SimConfig, state: GlobalState) -> tuple[float, float, float]:
    due = state.t % cfg.eval_every == 0 or state.t == cfg.hp.e_total
    if not due:
        return math.nan, math.nan, math.nan
    return evaluate_global(cfg, state.w)


def run_async(cfg: SimConfig) -> tuple[GlobalState, ExperimentTrace]:
    """Event-driven asynchronous run: exactly ``e_total`` aggregations.

    All clients start at clock zero; finish-event ties break on
    ``(fire_time, client_id)``.  A client whose round diverges aborts the run
    and the trace is marked diverged.
    """
    clients = build_clients(cfg)
    profiles = _client_profiles(cfg)
    by_id = {c.client_id: c for c in clients}
    prof_by_id = {c.client_id: p for c, p in zip(clients, profiles)}
    hp = cfg.hp

    state = GlobalState(w=cfg.w0)
    trace = ExperimentTrace(
        param_snapshots=[state.w] if cfg.record_params else None,
        gradient_samples=[] if cfg.record_gradients else None,
    )
    pending: dict[str, tuple[ParamVector, int, int]] = {}
    heap: list[tuple[float, str]] = []
    for c in clients:
        h = assign_local_iterations(cfg.policy, c.client_id, hp)
        pending[c.client_id] = (state.w, state.t, h)
        heapq.heappush(heap, (_round_time(prof_by_id[c.client_id], h, cfg), c.client_id))

    while state.aggregations < hp.e_total:
        fire_time, cid = heapq.heappop(heap)
        w_fetched, tau, h = pending[cid]
        try:
            update = local_train(
                by_id[cid], w_fetched, tau, h, grad_log=trace.gradient_samples
            )
        except DivergenceError as exc:
            trace.diverged = True
            trace.notes.append(str(exc))
            break
        state, rec = async_aggregate(state, update, hp, timestamp=fire_time)
        if cfg.record_params:
            trace.param_snapshots.append(state.w)
        loss, grad_sq, acc = _metrics_for_row(cfg, state)
        trace.rows.append(
            TraceRow(state.t, fire_time, loss, grad_sq, acc, rec.staleness, rec.beta_t, cid)
        )
        h_next = assign_local_iterations(cfg.policy, cid, hp)
        pending[cid] = (state.w, state.t, h_next)
        heapq.heappush(heap, (fire_time + _round_time(prof_by_id[cid], h_next, cfg), cid))
    return state, trace


def run_sync(cfg: SimConfig) -> tuple[GlobalState, ExperimentTrace]:
    """Synchronous FedAvg baseline: every round waits for the slowest client."""
    clients = build_clients(cfg)
    profiles = _client_profiles(cfg)
    shard_sizes = {c.client_id: len(c.shard) for c in clients}
    hp = cfg.hp

    state = GlobalState(w=cfg.w0)
    trace = ExperimentTrace(
        param_snapshots=[state.w] if cfg.record_params else None,
        gradient_samples=[] if cfg.record_gradients else None,
    )
    clock = 0.0
    for _ in range(hp.e_total):
        updates = []
        round_time = 0.0
        try:
            for c, prof in zip(clients, profiles):
                h = assign_local_iterations(cfg.policy, c.client_id, hp)
                updates.append(
                    local_train(c, state.w, state.t, h, grad_log=trace.gradient_samples)
                )
                round_time = max(round_time, _round_time(prof, h, cfg))
        except DivergenceError as exc:
            trace.diverged = True
            trace.notes.append(str(exc))
            break
        clock += round_time
        state = sync_round(state, updates, shard_sizes)
        if cfg.record_params:
            trace.param_snapshots.append(state.w)
        loss, grad_sq, acc = _metrics_for_row(cfg, state)
        trace.rows.append(
            TraceRow(state.t, clock, loss, grad_sq, acc, 0, math.nan, "all")
        )
    return state, trace


def run_replay(cfg: SimConfig, order: Sequence[str]) -> tuple[GlobalState, ExperimentTrace]:
    """Re-run an async schedule with a fixed aggregation order (no clock model).

    Used to check a distributed run against the simulator: feeding the
    recorded arrival order reproduces the same parameter trajectory, provided
    the iteration policy does not depend on assignment order (fixed or
    per-client table policies do not).
    """
    clients = build_clients(cfg)
    by_id = {c.client_id: c for c in clients}
    hp = cfg.hp

    state = GlobalState(w=cfg.w0)
    trace = ExperimentTrace()
    pending: dict[str, tuple[ParamVector, int, int]] = {}
    for c in clients:
        h = assign_local_iterations(cfg.policy, c.client_id, hp)
        pending[c.client_id] = (state.w, state.t, h)

    for i, cid in enumerate(order):
        if cid not in by_id:
            raise ConfigError(f"replay order names unknown client {cid!r}")
        w_fetched, tau, h = pending[cid]
        try:
            update = local_train(by_id[cid], w_fetched, tau, h)
        except DivergenceError as exc:
            trace.diverged = True
            trace.notes.append(str(exc))
            break
        state, rec = async_aggregate(state, update, hp, timestamp=float(i))
        loss, grad_sq, acc = _metrics_for_row(cfg, state)
        trace.rows.append(
            TraceRow(state.t, float(i), loss, grad_sq, acc, rec.staleness, rec.beta_t, cid)
        )
        h_next = assign_local_iterations(cfg.policy, cid, hp)
        pending[cid] = (state.w, state.t, h_next)
    return state, trace


def compare_wallclock(async_trace: ExperimentTrace, sync_trace: ExperimentTrace) -> float:
    """Fraction of simulated time saved by async: ``1 - async_total / sync_total``."""
    if async_trace.diverged or sync_trace.diverged:
        raise DivergenceError("cannot compare wall clocks of a diverged run")
    if not async_trace.rows or not sync_trace.rows:
        raise ValueError("both traces must contain aggregations")
    if len(async_trace.rows) != len(sync_trace.rows):
        raise ValueError(
            f"traces cover different budgets: {len(async_trace.rows)} vs {len(sync_trace.rows)} aggregations"
        )
    return 1.0 - async_trace.total_wall_clock_s / sync_trace.total_wall_clock_s
