"""Shared domain types and the server-side mixing arithmetic.

Everything here is a pure value: parameter vectors are immutable, the two
aggregation primitives (`staleness_weight`, `mix`) are side-effect free, and
all mutation of global training state is left to the server module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FedAsyncError",
    "DimensionMismatchError",
    "NonFiniteError",
    "ProtocolViolationError",
    "DivergenceError",
    "ConfigError",
    "StalenessWarning",
    "ParamVector",
    "Hyperparams",
    "ClientUpdate",
    "GlobalState",
    "staleness_weight",
    "mix",
    "derive_rng",
]


class FedAsyncError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(FedAsyncError):
    """Two parameter vectors (or a vector and a model) disagree on dimension."""


class NonFiniteError(FedAsyncError):
    """A NaN or infinity appeared where only finite values are allowed."""


class ProtocolViolationError(FedAsyncError):
    """A message violated the aggregation protocol (e.g. a timestamp from the future)."""


class DivergenceError(FedAsyncError):
    """Local training produced non-finite parameters and was aborted."""


class ConfigError(FedAsyncError):
    """An experiment configuration failed validation."""


class StalenessWarning(UserWarning):
    """Observed staleness exceeded the assumed bound; updates are never dropped."""


@dataclass(frozen=True, eq=False)
class ParamVector:
    """An immutable flat vector of model parameters.

    Entries are float64 and guaranteed finite; the wrapped array is read-only.
    All arithmetic partners must share the same ``dim``.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteError("parameter vector contains NaN or infinity")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @staticmethod
    def zeros(dim: int) -> "ParamVector":
        return ParamVector(np.zeros(int(dim)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self) -> str:  # keep reprs short in logs and test failures
        head = np.array2string(self.values[:4], precision=6, separator=", ")
        tail = ", ..." if self.dim > 4 else ""
        return f"ParamVector(dim={self.dim}, values={head[:-1]}{tail}])"


@dataclass(frozen=True)
class Hyperparams:
    """Every tunable knob of the optimization protocols.

    ``beta`` is the base mixing weight of an incoming client model; ``a`` is
    the exponent of the polynomial staleness decay; ``theta`` anchors local
    training to the dispatched global model.  ``beta = 1`` (full replacement)
    and ``h_min = 0`` (empty local loop) are admitted as degenerate settings
    used by reduction tests.
    """

    eta: float = 0.05
    beta: float = 0.7
    a: float = 0.5
    theta: float = 0.1
    h_min: int = 1
    h_max: int = 3
    e_total: int = 80
    k_bound: int = 16
    batch_size: int = 8
    momentum: float = 0.0
    alpha_kd: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        checks = [
            (self.eta > 0 and math.isfinite(self.eta), "eta must be > 0"),
            (0.0 < self.beta <= 1.0, "beta must be in (0, 1]"),
            (self.a >= 0 and math.isfinite(self.a), "a must be >= 0"),
            (self.theta >= 0 and math.isfinite(self.theta), "theta must be >= 0"),
            (0 <= self.h_min <= self.h_max, "need 0 <= h_min <= h_max"),
            (self.h_max >= 1, "h_max must be >= 1"),
            (self.e_total >= 1, "e_total must be >= 1"),
            (self.k_bound >= 0, "k_bound must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (0.0 <= self.alpha_kd <= 1.0, "alpha_kd must be in [0, 1]"),
            (0 <= self.seed < 2**64, "seed must fit in 64 unsigned bits"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def imbalance_ratio(self) -> float:
        """Spread of assignable local-iteration counts, h_max / h_min."""
        return self.h_max / self.h_min if self.h_min else math.inf


@dataclass(frozen=True)
class ClientUpdate:
    """What a client sends back: its trained parameters and the epoch it started from."""

    w_new: ParamVector
    tau: int
    client_id: str
    local_iterations_done: int

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ProtocolViolationError(f"negative dispatch epoch tau={self.tau}")
        if self.local_iterations_done < 0:
            raise ValueError("local_iterations_done must be >= 0")


@dataclass(frozen=True)
class GlobalState:
    """Server-side model plus epoch counter and aggregation history."""

    w: ParamVector
    t: int = 0
    max_staleness_seen: int = 0
    aggregations: int = 0

    def __post_init__(self) -> None:
        if self.t != self.aggregations:
            raise ValueError("epoch counter must equal the number of aggregations")
        if self.t < 0 or self.max_staleness_seen < 0:
            raise ValueError("epoch counter and staleness must be non-negative")


def staleness_weight(beta: float, a: float, t: int, tau: int) -> float:
    """Mixing weight for an update dispatched at epoch ``tau``, received at epoch ``t``.

    Returns ``beta * (1 + t - tau) ** -a``: equal to ``beta`` for a fresh
    update and decaying polynomially with staleness when ``a > 0``.  Extreme
    staleness may underflow the weight toward zero; the tiny weight is passed
    through unchanged rather than floored.
    """
    if not (math.isfinite(beta) and math.isfinite(a)):
        raise NonFiniteError("beta and a must be finite")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta={beta} outside (0, 1]")
    if a < 0.0:
        raise ValueError(f"staleness exponent a={a} must be >= 0")
    if tau < 0:
        raise ValueError(f"dispatch epoch tau={tau} must be >= 0")
    if t < tau:
        raise ProtocolViolationError(f"update from the future: t={t} < tau={tau}")
    return beta * float(1 + (t - tau)) ** (-a)


def mix(w_prev: ParamVector, w_new: ParamVector, beta_t: float) -> ParamVector:
    """Convex combination ``(1 - beta_t) * w_prev + beta_t * w_new``.

    ``beta_t = 0`` returns ``w_prev`` exactly and ``beta_t = 1`` returns
    ``w_new`` exactly (full replacement).  Each output entry is clamped to
    the closed interval spanned by its two inputs, so rounding can never
    push the result outside the convex hull.
    """
    if w_prev.dim != w_new.dim:
        raise DimensionMismatchError(f"dim {w_prev.dim} vs {w_new.dim}")
    if not math.isfinite(beta_t) or not 0.0 <= beta_t <= 1.0:
        raise ValueError(f"beta_t={beta_t} outside [0, 1]")
    blended = (1.0 - beta_t) * w_prev.values + beta_t * w_new.values
    lo = np.minimum(w_prev.values, w_new.values)
    hi = np.maximum(w_prev.values, w_new.values)
    return ParamVector(np.clip(blended, lo, hi))


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic child generator for a named stream of the experiment seed.

    Streams are identified by small integer tuples so that the simulator and
    the distributed runner derive identical per-client generators.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


# Stream ids used with derive_rng; shared by sim, netproto, and cli.
STREAM_INIT = 1
STREAM_PARTITION = 2
STREAM_POLICY = 3
STREAM_CLIENT = 4
STREAM_DISTILL = 5
