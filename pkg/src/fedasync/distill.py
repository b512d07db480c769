"""Staged knowledge distillation: teacher, optional teaching assistants, student.

The teacher trains on true labels; every later stage trains on a blend of a
classification loss and the squared-logit-distance loss against its
predecessor's logits.  The classification targets of a distillation stage are
either the predecessor's argmax predictions (default) or the true labels,
selected by ``target_mode``.  Stages run sequentially, and the trained
student's weights can be saved and reused as the initial model of a federated
fine-tuning run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import models
from .core import (
    ConfigError,
    DivergenceError,
    Hyperparams,
    ParamVector,
    STREAM_DISTILL,
    derive_rng,
)
from .data import Dataset, full_batch, sample_indices, whole_dataset_shard
from .models import Batch, ModelSpec

__all__ = [
    "TARGET_MODES",
    "DistillPlan",
    "StageResult",
    "ChainResult",
    "train_supervised",
    "train_stage",
    "distill_chain",
]

TARGET_MODES = ("teacher-argmax", "true-labels")

# grad_fn(current weights, dataset row indices, batch) -> gradient
GradFn = Callable[[ParamVector, np.ndarray, Batch], ParamVector]


@dataclass(frozen=True)
class DistillPlan:
    """A distillation chain: teacher, zero to three TAs, then the student.

    Capacity ordering (teacher >= TAs >= student) is the caller's
    responsibility and is not enforced.
    """

    teacher: ModelSpec
    tas: tuple[ModelSpec, ...]
    student: ModelSpec
    alpha: float = 0.5
    epochs_per_stage: int = 5
    target_mode: str = "teacher-argmax"

    def __post_init__(self) -> None:
        if len(self.tas) > 3:
            raise ConfigError("at most three teaching assistants are supported")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.epochs_per_stage < 1:
            raise ConfigError("epochs_per_stage must be >= 1")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
        classes = {s.num_classes for s in (self.teacher, *self.tas, self.student)}
        if len(classes) != 1:
            raise ConfigError(f"all chain models must share num_classes, got {classes}")

    @property
    def stage_specs(self) -> tuple[ModelSpec, ...]:
        return (self.teacher, *self.tas, self.student)


@dataclass
class StageResult:
    name: str
    spec: ModelSpec
    weights: ParamVector
    train_loss: float
    eval_accuracy: float
    wall_time_s: float


@dataclass
class ChainResult:
    stages: list[StageResult]

    @property
    def total_wall_time_s(self) -> float:
        return sum(s.wall_time_s for s in self.stages)

    @property
    def student(self) -> StageResult:
        return self.stages[-1]


def _steps_per_epoch(n_rows: int, batch_size: int) -> int:
    return max(1, math.ceil(n_rows / batch_size))


def _sgd_loop(
    spec: ModelSpec,
    w0: ParamVector,
    dataset: Dataset,
    epochs: int,
    hp: Hyperparams,
    rng: np.random.Generator,
    grad_fn: GradFn,
    total_steps: Optional[int] = None,
) -> ParamVector:
    """Minibatch SGD shared by supervised and distillation stages.

    ``grad_fn`` maps (weights, row indices, batch) to a step direction, so
    swapping the loss never changes batch sampling; a stage with ``alpha = 1``
    is therefore bit-identical to plain supervised training.
    """
    shard = whole_dataset_shard(dataset)
    w = w0.values.copy()
    velocity = np.zeros_like(w) if hp.momentum > 0.0 else None
    steps = total_steps if total_steps is not None else epochs * _steps_per_epoch(
        len(dataset), hp.batch_size
    )
    for step in range(steps):
        rows = sample_indices(shard, hp.batch_size, rng)
        batch = Batch(dataset.features[rows], dataset.labels[rows])
        g = grad_fn(ParamVector(w), rows, batch).values
        if velocity is not None:
            velocity = hp.momentum * velocity + g
            g = velocity
        w = w - hp.eta * g
        if not np.isfinite(w).all():
            raise DivergenceError(f"training diverged at step {step + 1}/{steps}")
    return ParamVector(w)


def train_supervised(
    spec: ModelSpec,
    w0: ParamVector,
    dataset: Dataset,
    epochs: int,
    hp: Hyperparams,
    rng: np.random.Generator,
    total_steps: Optional[int] = None,
) -> ParamVector:
    """Plain minibatch SGD on true labels; also the centralized baseline trainer."""

    def grad_fn(w: ParamVector, rows: np.ndarray, batch: Batch) -> ParamVector:
        return models.grad(spec, w, batch)

    return _sgd_loop(spec, w0, dataset, epochs, hp, rng, grad_fn, total_steps)


def train_stage(
    from_spec: ModelSpec,
    from_w: ParamVector,
    to_spec: ModelSpec,
    dataset: Dataset,
    alpha: float,
    epochs: int,
    target_mode: str,
    hp: Hyperparams,
    rng: np.random.Generator,
    w0: Optional[ParamVector] = None,
) -> ParamVector:
    """Train ``to_spec`` against a frozen predecessor model.

    The step direction is ``alpha * grad(cls) + (1 - alpha) * grad(kd)``; the
    endpoints skip the unused term entirely, so ``alpha = 1`` reduces to
    supervised training on the chosen targets and ``alpha = 0`` to pure logit
    matching.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must be in [0, 1]")
    if target_mode not in TARGET_MODES:
        raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
    if from_spec.num_classes != to_spec.num_classes:
        raise ConfigError(
            f"logit widths differ: {from_spec.num_classes} vs {to_spec.num_classes}"
        )
    teacher_logits = models.predict_logits(from_spec, from_w, dataset.features)
    if target_mode == "teacher-argmax":
        cls_labels = np.argmax(teacher_logits, axis=1).astype(np.int64)
    else:
        cls_labels = dataset.labels.astype(np.int64)
    if w0 is None:
        w0 = models.init_params(to_spec, hp.seed)

    def grad_fn(w: ParamVector, rows: np.ndarray, batch: Batch) -> ParamVector:
        if alpha == 1.0:
            return models.grad(to_spec, w, Batch(batch.features, cls_labels[rows]))
        if alpha == 0.0:
            return models.kd_grad(to_spec, w, batch.features, teacher_logits[rows])
        g_cls = models.grad(to_spec, w, Batch(batch.features, cls_labels[rows]))
        g_kd = models.kd_grad(to_spec, w, batch.features, teacher_logits[rows])
        return ParamVector(alpha * g_cls.values + (1.0 - alpha) * g_kd.values)

    return _sgd_loop(to_spec, w0, dataset, epochs, hp, rng, grad_fn)


def distill_chain(
    plan: DistillPlan,
    train: Dataset,
    eval_dataset: Dataset,
    hp: Hyperparams,
) -> ChainResult:
    """Run the whole chain and report per-stage accuracy and wall time.

    Stage k trains from stage k-1's frozen weights; the teacher always trains
    on true labels.  Per-stage generators derive from the experiment seed, so
    chains are reproducible while wall times are measured, not simulated.
    """
    names = ["teacher"] + [f"ta{i + 1}" for i in range(len(plan.tas))] + ["student"]
    stages: list[StageResult] = []
    prev: Optional[StageResult] = None
    for idx, (name, spec) in enumerate(zip(names, plan.stage_specs)):
        rng = derive_rng(hp.seed, STREAM_DISTILL, idx)
        w0 = models.init_params(spec, hp.seed + idx)
        started = time.perf_counter()
        if prev is None:
            w = train_supervised(spec, w0, train, plan.epochs_per_stage, hp, rng)
        else:
            w = train_stage(
                prev.spec, prev.weights, spec, train,
                plan.alpha, plan.epochs_per_stage, plan.target_mode, hp, rng, w0=w0,
            )
        elapsed = time.perf_counter() - started
        stages.append(
            StageResult(
                name=name,
                spec=spec,
                weights=w,
                train_loss=models.loss(spec, w, full_batch(train)),
                eval_accuracy=models.accuracy(spec, w, full_batch(eval_dataset)),
                wall_time_s=elapsed,
            )
        )
        prev = stages[-1]
    return ChainResult(stages=stages)
