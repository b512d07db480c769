"""Client-side local training: anchored SGD from a dispatched global model.

A client receives ``(w_t, t)``, runs a fixed number of proximal SGD
iterations on batches from its own shard, and returns the trained parameters
stamped with the epoch it started from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ClientUpdate, DivergenceError, Hyperparams, ParamVector
from .data import Dataset, Shard, sample_batch
from .models import GradientSample, ModelSpec, grad_and_prox

__all__ = ["ClientConfig", "local_train"]


@dataclass
class ClientConfig:
    """One simulated or remote client: identity, data view, and private rng."""

    client_id: str
    dataset: Dataset
    shard: Shard
    spec: ModelSpec
    hp: Hyperparams
    rng: np.random.Generator

    def __post_init__(self) -> None:
        if len(self.shard) == 0:
            raise ValueError(f"client {self.client_id!r} has an empty shard")


def local_train(
    cfg: ClientConfig,
    w_t: ParamVector,
    t: int,
    h: int,
    start: Optional[ParamVector] = None,
    grad_log: Optional[list[GradientSample]] = None,
) -> ClientUpdate:
    """Run ``h`` anchored SGD iterations from the dispatched model.

    Each iteration samples a fresh batch and steps against the anchored
    gradient (data gradient plus ``theta * (w - w_t)``), with optional
    momentum.  The momentum buffer starts at zero on every call; clients keep
    no optimizer state between rounds.

    ``start`` overrides the initial iterate (test hook; defaults to ``w_t``).
    ``grad_log``, when given, receives one `GradientSample` per iteration.

    Raises `DivergenceError` if the iterate turns non-finite mid-training,
    so a poisoned model is never sent to the server.
    """
    hp = cfg.hp
    if not hp.h_min <= h <= hp.h_max:
        raise ValueError(f"h={h} outside [{hp.h_min}, {hp.h_max}]")
    tau = t
    w = (start if start is not None else w_t).values.copy()
    if w.shape != w_t.values.shape:
        raise ValueError("start vector must match the dispatched model's dim")
    velocity = np.zeros_like(w) if hp.momentum > 0.0 else None

    for it in range(h):
        batch = sample_batch(cfg.shard, cfg.dataset, hp.batch_size, cfg.rng)
        g, p = grad_and_prox(cfg.spec, ParamVector(w), w_t, hp.theta, batch)
        if grad_log is not None:
            grad_log.append(GradientSample(w.copy(), g.values, p.values))
        if velocity is not None:
            velocity = hp.momentum * velocity + p.values
            step = velocity
        else:
            step = p.values
        with np.errstate(over="ignore", invalid="ignore"):
            w = w - hp.eta * step
        if not np.isfinite(w).all():
            raise DivergenceError(
                f"client {cfg.client_id!r} diverged at local iteration {it + 1}/{h} "
                f"(epoch {tau}); aborting round"
            )
    return ClientUpdate(
        w_new=ParamVector(w),
        tau=tau,
        client_id=cfg.client_id,
        local_iterations_done=h,
    )
