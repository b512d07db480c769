"""Learner abstractions: losses, analytic gradients, predictions, KD losses.

Four model kinds are supported, all with hand-derived gradients over a flat
parameter vector:

* ``l2-linear-regression`` — squared error, real labels.
* ``logistic-regression``  — binary cross-entropy, labels in {0, 1}.
* ``softmax-classifier``   — multinomial cross-entropy.
* ``two-layer``            — tanh hidden layer feeding a softmax head; exists
  mainly to exercise frozen-coordinate fine-tuning.

Every operation is stateless and safe to call concurrently on shared
read-only parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    DimensionMismatchError,
    NonFiniteError,
    ParamVector,
    derive_rng,
    STREAM_INIT,
)

KINDS = ("l2-linear-regression", "logistic-regression", "softmax-classifier", "two-layer")

__all__ = [
    "Batch",
    "ModelSpec",
    "GradientSample",
    "AssumptionEstimates",
    "param_dim",
    "init_params",
    "loss",
    "grad",
    "grad_and_prox",
    "prox_grad",
    "predict_logits",
    "predict_labels",
    "accuracy",
    "kd_loss",
    "kd_grad",
    "combined_loss",
    "finite_difference_grad",
    "estimate_assumption_constants",
]


@dataclass(frozen=True, eq=False)
class Batch:
    """A minibatch: features are (m, d), labels are (m,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labs = np.asarray(self.labels).reshape(-1)
        if feats.shape[0] != labs.shape[0]:
            raise ValueError(f"{feats.shape[0]} feature rows vs {labs.shape[0]} labels")
        if feats.size and not np.isfinite(feats).all():
            raise NonFiniteError("batch features contain NaN or infinity")
        if labs.size and not np.isfinite(labs.astype(np.float64)).all():
            raise NonFiniteError("batch labels contain NaN or infinity")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and regularization of a learner.

    ``frozen_mask`` marks coordinates excluded from training (True = frozen);
    it must cover the full parameter vector and leave at least one coordinate
    trainable.
    """

    kind: str
    input_dim: int
    num_classes: Optional[int] = None
    hidden_dim: Optional[int] = None
    l2_coeff: float = 0.0
    frozen_mask: Optional[tuple[bool, ...]] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind in ("softmax-classifier", "two-layer"):
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError(f"{self.kind} needs num_classes >= 2")
        if self.kind == "logistic-regression" and self.num_classes not in (None, 2):
            raise ValueError("logistic-regression is binary (num_classes = 2)")
        if self.kind == "two-layer" and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ValueError("two-layer needs hidden_dim >= 1")
        if self.l2_coeff < 0 or not math.isfinite(self.l2_coeff):
            raise ValueError("l2_coeff must be finite and >= 0")
        if self.frozen_mask is not None:
            mask = tuple(bool(b) for b in self.frozen_mask)
            if len(mask) != param_dim(self):
                raise DimensionMismatchError(
                    f"frozen_mask length {len(mask)} != parameter dim {param_dim(self)}"
                )
            if all(mask):
                raise ValueError("frozen_mask freezes every parameter")
            object.__setattr__(self, "frozen_mask", mask)


def param_dim(spec: ModelSpec) -> int:
    """Length of the flat parameter vector for a spec."""
    d = spec.input_dim
    if spec.kind in ("l2-linear-regression", "logistic-regression"):
        return d + 1
    if spec.kind == "softmax-classifier":
        k = spec.num_classes
        return (d + 1) * k
    hid, k = spec.hidden_dim, spec.num_classes
    return d * hid + hid + hid * k + k


def init_params(spec: ModelSpec, seed: int = 0) -> ParamVector:
    """Deterministic initial parameters: zeros, except small random weights
    for the two-layer model where zeros would freeze the hidden units into
    symmetry."""
    dim = param_dim(spec)
    if spec.kind != "two-layer":
        return ParamVector.zeros(dim)
    rng = derive_rng(seed, STREAM_INIT)
    return ParamVector(0.1 * rng.standard_normal(dim))


def _trainable(spec: ModelSpec) -> Optional[np.ndarray]:
    if spec.frozen_mask is None:
        return None
    return ~np.asarray(spec.frozen_mask, dtype=bool)


def _check_w(spec: ModelSpec, w: ParamVector) -> np.ndarray:
    if w.dim != param_dim(spec):
        raise DimensionMismatchError(f"w.dim={w.dim} but {spec.kind} needs {param_dim(spec)}")
    return w.values


def _unpack_linear(spec: ModelSpec, w: np.ndarray) -> tuple[np.ndarray, float]:
    return w[: spec.input_dim], float(w[spec.input_dim])


def _unpack_softmax(spec: ModelSpec, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d, k = spec.input_dim, spec.num_classes
    return w[: d * k].reshape(d, k), w[d * k :]

def _unpack_two_layer(spec: ModelSpec, w: np.ndarray):
    d, hid, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    i = 0
    w1 = w[i : i + d * hid].reshape(d, hid); i += d * hid
    b1 = w[i : i + hid]; i += hid
    w2 = w[i : i + hid * k].reshape(hid, k); i += hid * k
    b2 = w[i : i + k]
    return w1, b1, w2, b2


def _check_class_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = labels.astype(np.float64)
    if not np.all(y == np.floor(y)):
        raise ValueError("classification labels must be integers")
    yi = labels.astype(np.int64)
    if yi.size and (yi.min() < 0 or yi.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    return yi


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_logits(spec: ModelSpec, w: ParamVector, features: np.ndarray) -> np.ndarray:
    """Forward pass: per-example score vectors, shape (m, K).

    Regression and logistic models produce a single-column score (the raw
    prediction / pre-sigmoid logit).
    """
    wv = _check_w(spec, w)
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise DimensionMismatchError(f"features have {x.shape[1]} columns, expected {spec.input_dim}")
    if spec.kind in ("l2-linear-regression", "logistic-regression"):
        wt, b = _unpack_linear(spec, wv)
        return (x @ wt + b)[:, None]
    if spec.kind == "softmax-classifier":
        wt, b = _unpack_softmax(spec, wv)
        return x @ wt + b
    w1, b1, w2, b2 = _unpack_two_layer(spec, wv)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def predict_labels(spec: ModelSpec, w: ParamVector, features: np.ndarray) -> np.ndarray:
    """Top-1 class per example (logistic thresholds its single logit at 0)."""
    z = predict_logits(spec, w, features)
    if spec.kind == "l2-linear-regression":
        raise ValueError("regression model has no class predictions")
    if spec.kind == "logistic-regression":
        return (z[:, 0] > 0).astype(np.int64)
    return np.argmax(z, axis=1).astype(np.int64)


def accuracy(spec: ModelSpec, w: ParamVector, batch: Batch) -> float:
    """Fraction of examples whose top-1 prediction matches the label."""
    pred = predict_labels(spec, w, batch.features)
    return float(np.mean(pred == batch.labels.astype(np.int64)))


def _l2_penalty(spec: ModelSpec, wv: np.ndarray) -> float:
    if spec.l2_coeff == 0.0:
        return 0.0
    tr = _trainable(spec)
    wt = wv if tr is None else wv[tr]
    return 0.5 * spec.l2_coeff * float(wt @ wt)


def loss(spec: ModelSpec, w: ParamVector, batch: Batch) -> float:
    """Mean per-example loss plus the l2 penalty over trainable coordinates."""
    wv = _check_w(spec, w)
    z = predict_logits(spec, w, batch.features)
    m = batch.size
    if spec.kind == "l2-linear-regression":
        resid = z[:, 0] - batch.labels.astype(np.float64)
        data = 0.5 * float(resid @ resid) / m
    elif spec.kind == "logistic-regression":
        y = _check_class_labels(batch.labels, 2).astype(np.float64)
        s = z[:, 0]
        # stable binary cross-entropy: max(s,0) - s*y + log(1 + exp(-|s|))
        data = float(np.mean(np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))))
    else:
        y = _check_class_labels(batch.labels, spec.num_classes)
        logp = _log_softmax(z)
        data = -float(np.mean(logp[np.arange(m), y]))
    return data + _l2_penalty(spec, wv)


def grad(spec: ModelSpec, w: ParamVector, batch: Batch) -> ParamVector:
    """Analytic gradient of `loss`; frozen coordinates are zeroed."""
    wv = _check_w(spec, w)
    x = np.atleast_2d(np.asarray(batch.features, dtype=np.float64))
    m = batch.size
    g = np.empty_like(wv)

    if spec.kind in ("l2-linear-regression", "logistic-regression"):
        z = predict_logits(spec, w, x)[:, 0]
        if spec.kind == "l2-linear-regression":
            delta = (z - batch.labels.astype(np.float64)) / m
        else:
            y = _check_class_labels(batch.labels, 2).astype(np.float64)
            p = 1.0 / (1.0 + np.exp(-z))
            delta = (p - y) / m
        g[: spec.input_dim] = x.T @ delta
        g[spec.input_dim] = delta.sum()
    elif spec.kind == "softmax-classifier":
        y = _check_class_labels(batch.labels, spec.num_classes)
        z = predict_logits(spec, w, x)
        p = np.exp(_log_softmax(z))
        p[np.arange(m), y] -= 1.0
        p /= m
        d, k = spec.input_dim, spec.num_classes
        g[: d * k] = (x.T @ p).reshape(-1)
        g[d * k :] = p.sum(axis=0)
    else:
        y = _check_class_labels(batch.labels, spec.num_classes)
        w1, b1, w2, b2 = _unpack_two_layer(spec, wv)
        a = np.tanh(x @ w1 + b1)
        z = a @ w2 + b2
        p = np.exp(_log_softmax(z))
        p[np.arange(m), y] -= 1.0
        p /= m
        da = p @ w2.T
        dz1 = da * (1.0 - a * a)
        d, hid, k = spec.input_dim, spec.hidden_dim, spec.num_classes
        i = 0
        g[i : i + d * hid] = (x.T @ dz1).reshape(-1); i += d * hid
        g[i : i + hid] = dz1.sum(axis=0); i += hid
        g[i : i + hid * k] = (a.T @ p).reshape(-1); i += hid * k
        g[i :] = p.sum(axis=0)

    if spec.l2_coeff != 0.0:
        g += spec.l2_coeff * wv
    tr = _trainable(spec)
    if tr is not None:
        g[~tr] = 0.0
    return ParamVector(g)


def grad_and_prox(
    spec: ModelSpec,
    w: ParamVector,
    w_anchor: ParamVector,
    theta: float,
    batch: Batch,
) -> tuple[ParamVector, ParamVector]:
    """Data gradient and proximal gradient ``grad + theta * (w - w_anchor)``.

    Both share one forward/backward pass so that logging the pair is
    bit-identical to computing the proximal gradient alone.
    """
    if w.dim != w_anchor.dim:
        raise DimensionMismatchError(f"w.dim={w.dim} vs anchor dim {w_anchor.dim}")
    if theta < 0 or not math.isfinite(theta):
        raise ValueError("theta must be finite and >= 0")
    g = grad(spec, w, batch)
    if theta == 0.0:
        return g, g
    prox = g.values + theta * (w.values - w_anchor.values)
    tr = _trainable(spec)
    if tr is not None:
        prox = prox.copy()
        prox[~tr] = 0.0
    return g, ParamVector(prox)


def prox_grad(
    spec: ModelSpec,
    w: ParamVector,
    w_anchor: ParamVector,
    theta: float,
    batch: Batch,
) -> ParamVector:
    """Gradient of the anchored local objective; equals `grad` when theta = 0."""
    return grad_and_prox(spec, w, w_anchor, theta, batch)[1]


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray) -> float:
    """Squared Euclidean distance between logit vectors.

    For 2-D inputs (batch of logit rows) the per-row squared norms are
    averaged, keeping the value batch-size invariant.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise DimensionMismatchError(f"logit shapes {s.shape} vs {t.shape}")
    diff = s - t
    if diff.ndim <= 1:
        return float(diff @ diff)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def kd_grad(
    spec: ModelSpec,
    w: ParamVector,
    features: np.ndarray,
    teacher_logits: np.ndarray,
) -> ParamVector:
    """Gradient of the batch-averaged `kd_loss` with respect to ``w``.

    ``teacher_logits`` is (m, K) and treated as a constant target.
    """
    wv = _check_w(spec, w)
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    z = predict_logits(spec, w, x)
    if z.shape != t.shape:
        raise DimensionMismatchError(f"student logits {z.shape} vs teacher {t.shape}")
    m = x.shape[0]
    dz = 2.0 * (z - t) / m
    g = np.empty_like(wv)
    if spec.kind in ("l2-linear-regression", "logistic-regression"):
        g[: spec.input_dim] = x.T @ dz[:, 0]
        g[spec.input_dim] = dz[:, 0].sum()
    elif spec.kind == "softmax-classifier":
        d, k = spec.input_dim, spec.num_classes
        g[: d * k] = (x.T @ dz).reshape(-1)
        g[d * k :] = dz.sum(axis=0)
    else:
        w1, b1, w2, b2 = _unpack_two_layer(spec, wv)
        a = np.tanh(x @ w1 + b1)
        da = dz @ w2.T
        dz1 = da * (1.0 - a * a)
        d, hid, k = spec.input_dim, spec.hidden_dim, spec.num_classes
        i = 0
        g[i : i + d * hid] = (x.T @ dz1).reshape(-1); i += d * hid
        g[i : i + hid] = dz1.sum(axis=0); i += hid
        g[i : i + hid * k] = (a.T @ dz).reshape(-1); i += hid * k
        g[i :] = dz.sum(axis=0)
    tr = _trainable(spec)
    if tr is not None:
        g[~tr] = 0.0
    return ParamVector(g)


def combined_loss(alpha: float, l_cls: float, l_kd: float) -> float:
    """Affine blend ``alpha * l_cls + (1 - alpha) * l_kd``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return alpha * l_cls + (1.0 - alpha) * l_kd


def finite_difference_grad(
    spec: ModelSpec, w: ParamVector, batch: Batch, step: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of `loss`; the independent check for `grad`."""
    wv = _check_w(spec, w).copy()
    out = np.zeros_like(wv)
    for i in range(wv.size):
        orig = wv[i]
        wv[i] = orig + step
        up = loss(spec, ParamVector(wv), batch)
        wv[i] = orig - step
        down = loss(spec, ParamVector(wv), batch)
        wv[i] = orig
        out[i] = (up - down) / (2.0 * step)
    tr = _trainable(spec)
    if tr is not None:
        out[~tr] = 0.0
    return out


def _random_case(spec: ModelSpec, rng: np.random.Generator, batch_rows: int) -> tuple[ParamVector, Batch]:
    w = ParamVector(0.5 * rng.standard_normal(param_dim(spec)))
    x = rng.standard_normal((batch_rows, spec.input_dim))
    if spec.kind == "l2-linear-regression":
        y = rng.standard_normal(batch_rows)
    else:
        k = 2 if spec.kind == "logistic-regression" else spec.num_classes
        y = rng.integers(0, k, size=batch_rows)
    return w, Batch(x, y)


def gradcheck(
    spec: ModelSpec,
    rng: np.random.Generator,
    draws: int = 100,
    step: float = 1e-6,
    batch_rows: int = 5,
) -> float:
    """Worst relative disagreement between `grad` and central differences.

    The per-coordinate error is ``|g - fd| / max(1, |g|, |fd|)`` so that tiny
    coordinates are judged absolutely and large ones relatively.
    """
    worst = 0.0
    for _ in range(draws):
        w, batch = _random_case(spec, rng, batch_rows)
        g = grad(spec, w, batch).values
        fd = finite_difference_grad(spec, w, batch, step)
        denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(g - fd) / denom)))
    return worst


@dataclass(frozen=True)
class GradientSample:
    """One observed (parameters, data gradient, anchored gradient) triple."""

    w: np.ndarray
    grad_loss: np.ndarray
    grad_prox: np.ndarray


@dataclass(frozen=True)
class AssumptionEstimates:
    """Empirical bounds backing the convergence analysis; reported, never enforced."""

    b1_sq_hat: float
    b2_sq_hat: float
    l_hat: float
    num_samples: int


def estimate_assumption_constants(
    samples: Sequence[GradientSample], max_pair_samples: int = 200
) -> AssumptionEstimates:
    """Largest observed gradient norms and a smoothness estimate.

    ``b1_sq_hat``/``b2_sq_hat`` are the max squared norms of the data and
    anchored gradients.  ``l_hat`` is the max of ``|grad(v) - grad(u)| / |v - u|``
    over sampled pairs of the trace (the caller supplies full-objective
    gradients when a smoothness constant of the global objective is wanted).
    """
    if not samples:
        raise ValueError("empty gradient trace")
    b1 = max(float(s.grad_loss @ s.grad_loss) for s in samples)
    b2 = max(float(s.grad_prox @ s.grad_prox) for s in samples)
    picked = list(samples)
    if len(picked) > max_pair_samples:
        idx = np.linspace(0, len(picked) - 1, max_pair_samples).astype(int)
        picked = [picked[i] for i in idx]
    l_hat = 0.0
    for i in range(len(picked)):
        for j in range(i + 1, len(picked)):
            dw = picked[i].w - picked[j].w
            denom = float(np.linalg.norm(dw))
            if denom < 1e-12:
                continue
            dg = picked[i].grad_loss - picked[j].grad_loss
            l_hat = max(l_hat, float(np.linalg.norm(dg)) / denom)
    return AssumptionEstimates(b1, b2, l_hat, len(samples))
