"""Synthetic datasets, CSV ingestion, IID partitioning, and batch sampling.

Datasets are immutable after construction; shards are read-only index views
into a parent dataset.  All randomness flows through explicitly passed numpy
generators so that equal seeds reproduce shards and batches exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NonFiniteError
from .models import Batch

__all__ = [
    "Dataset",
    "Shard",
    "CsvFormatError",
    "generate_blobs",
    "partition_iid",
    "sample_batch",
    "sample_indices",
    "load_csv",
    "save_csv",
    "split_train_eval",
    "full_batch",
    "whole_dataset_shard",
]

# Cluster centers are drawn at this scale so that unit-spread blobs stay
# linearly separable with high probability.
_CENTER_SCALE = 2.0


class CsvFormatError(Exception):
    """A CSV file could not be parsed; the message carries the line number."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus labels; ``num_classes`` is None for regression."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self) -> None:
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.num_classes is None:
            labs = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        else:
            labs = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if feats.shape[0] != labs.shape[0]:
            raise ValueError(f"{feats.shape[0]} rows vs {labs.shape[0]} labels")
        if feats.size and not np.isfinite(feats).all():
            raise NonFiniteError("dataset features contain NaN or infinity")
        if self.num_classes is None:
            if labs.size and not np.isfinite(labs).all():
                raise NonFiniteError("dataset labels contain NaN or infinity")
        elif labs.size and (labs.min() < 0 or labs.max() >= self.num_classes):
            raise ValueError(f"label outside [0, {self.num_classes})")
        feats.flags.writeable = False
        labs.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True, eq=False)
class Shard:
    """A client's slice of a parent dataset, as row indices."""

    owner: str
    indices: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and idx.min() < 0:
            raise ValueError("negative row index in shard")
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate row index in shard")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def generate_blobs(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    cluster_spread: float,
    seed: int,
) -> Dataset:
    """Gaussian clusters with one class per cluster, rows grouped by class.

    Cluster means are drawn deterministically from ``seed``; shrinking
    ``cluster_spread`` makes the classes separable in the limit.
    """
    if num_classes < 1 or dim < 1 or samples_per_class < 1:
        raise ValueError("num_classes, dim, and samples_per_class must be >= 1")
    if not (cluster_spread > 0 and math.isfinite(cluster_spread)):
        raise ValueError("cluster_spread must be finite and > 0")
    rng = np.random.default_rng(seed)
    centers = _CENTER_SCALE * rng.standard_normal((num_classes, dim))
    feats = np.empty((num_classes * samples_per_class, dim))
    labs = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for c in range(num_classes):
        lo = c * samples_per_class
        hi = lo + samples_per_class
        feats[lo:hi] = centers[c] + cluster_spread * rng.standard_normal((samples_per_class, dim))
        labs[lo:hi] = c
    return Dataset(feats, labs, num_classes)


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> list[Shard]:
    """Random permutation split into near-equal disjoint shards.

    Shard sizes differ by at most one (larger shards first); the union of all
    shard indices is exactly the dataset.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot partition an empty dataset")
    if not 1 <= n_clients <= n:
        raise ValueError(f"n_clients={n_clients} outside [1, {n}]")
    perm = np.random.default_rng(seed).permutation(n)
    return [
        Shard(owner=f"c{i:03d}", indices=part)
        for i, part in enumerate(np.array_split(perm, n_clients))
    ]


def sample_indices(shard: Shard, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Dataset row indices for one batch: uniform draws with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(shard) == 0:
        raise ValueError(f"shard {shard.owner!r} is empty")
    pos = rng.integers(0, len(shard), size=batch_size)
    return shard.indices[pos]


def sample_batch(
    shard: Shard, parent: Dataset, batch_size: int, rng: np.random.Generator
) -> Batch:
    """Draw a batch from the shard, advancing ``rng``."""
    rows = sample_indices(shard, batch_size, rng)
    return Batch(parent.features[rows], parent.labels[rows])


def full_batch(dataset: Dataset) -> Batch:
    """The whole dataset as one batch (used for objective evaluation)."""
    return Batch(dataset.features, dataset.labels)


def whole_dataset_shard(dataset: Dataset, owner: str = "all") -> Shard:
    """Identity shard covering every row, for centralized training."""
    return Shard(owner=owner, indices=np.arange(len(dataset), dtype=np.int64))


def split_train_eval(dataset: Dataset, eval_fraction: float) -> tuple[Dataset, Dataset]:
    """Deterministic train/eval split; stratified per class for classification.

    The last ``ceil(eval_fraction * n)`` rows of each class go to the eval
    set, so both splits share the same class mix.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    if dataset.num_classes is None:
        cut = len(dataset) - math.ceil(eval_fraction * len(dataset))
        if cut < 1:
            raise ValueError("eval_fraction leaves no training rows")
        idx = np.arange(len(dataset))
        tr, ev = idx[:cut], idx[cut:]
    else:
        tr_parts, ev_parts = [], []
        for c in range(dataset.num_classes):
            rows = np.flatnonzero(dataset.labels == c)
            take = math.ceil(eval_fraction * rows.size)
            tr_parts.append(rows[: rows.size - take])
            ev_parts.append(rows[rows.size - take :])
        tr = np.concatenate(tr_parts)
        ev = np.concatenate(ev_parts)
        if tr.size == 0:
            raise ValueError("eval_fraction leaves no training rows")
    mk = lambda rows: Dataset(dataset.features[rows], dataset.labels[rows], dataset.num_classes)
    return mk(tr), mk(ev)


def load_csv(path) -> Dataset:
    """Read a numeric CSV (last column = label) into a Dataset.

    Lines starting with ``#`` are comments.  Integer-valued, non-negative
    labels make a classification dataset with ``num_classes = max + 1``;
    anything else is treated as regression.
    """
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if width is None:
                width = len(fields)
                if width < 2:
                    raise CsvFormatError(f"line {lineno}: need at least one feature and a label")
            elif len(fields) != width:
                raise CsvFormatError(
                    f"line {lineno}: got {len(fields)} fields, expected {width}"
                )
            try:
                vals = [float(f) for f in fields]
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise CsvFormatError(f"line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    feats, labs = arr[:, :-1], arr[:, -1]
    if np.all(labs == np.floor(labs)) and labs.min() >= 0:
        return Dataset(feats, labs.astype(np.int64), int(labs.max()) + 1)
    return Dataset(feats, labs, None)


def save_csv(dataset: Dataset, path) -> None:
    """Write a Dataset in the format `load_csv` reads, round-trip exact."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# features..., label\n")
        for i in range(len(dataset)):
            feats = ",".join(f"{v:.17g}" for v in dataset.features[i])
            if dataset.num_classes is None:
                fh.write(f"{feats},{dataset.labels[i]:.17g}\n")
            else:
                fh.write(f"{feats},{int(dataset.labels[i])}\n")
