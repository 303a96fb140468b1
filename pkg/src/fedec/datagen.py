"""Synthetic data, CSV ingestion and class-shard non-IID partitioning."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{y.size} labels for {x.shape[0]} examples")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.labels[index], self.n_classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    __hash__ = None


@dataclass(frozen=True)
class PartitionSpec:
    clients: int
    classes_per_client: int
    seed: int = 0
    train_fraction: float = 0.8

    def validate(self, n_classes: int) -> int:
        """Return shards per class, or raise if the shard arithmetic does not work out."""
        if self.clients < 1 or self.classes_per_client < 1:
            raise ValueError("clients and classes_per_client must be positive")
        if self.classes_per_client > n_classes:
            raise ValueError(
                f"classes_per_client={self.classes_per_client} exceeds class count {n_classes}"
            )
        total = self.clients * self.classes_per_client
        if total % n_classes:
            raise ValueError(
                f"clients * classes_per_client = {total} is not divisible by {n_classes} classes"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        return total // n_classes


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    # row indices into the pooled dataset
    train_index: np.ndarray = field(repr=False, default=None)
    test_index: np.ndarray = field(repr=False, default=None)

    @property
    def classes(self) -> List[int]:
        return sorted(set(self.train.labels.tolist()) | set(self.test.labels.tolist()))


@dataclass
class PartitionSummary:
    clients: int
    classes_per_client: int
    shards_per_class: int
    shard_sizes: Dict[int, int]
    dropped: Dict[int, int]
    client_classes: List[List[int]]
    digest: str

    def to_json(self) -> str:
        return json.dumps({
            "clients": self.clients,
            "classes_per_client": self.classes_per_client,
            "shards_per_class": self.shards_per_class,
            "shard_sizes": {str(k): v for k, v in self.shard_sizes.items()},
            "dropped_examples": {str(k): v for k, v in self.dropped.items()},
            "client_classes": self.client_classes,
            "hash": self.digest,
        }, indent=2, sort_keys=True)


def shard_partition(dataset: LabeledDataset, spec: PartitionSpec,
                    return_summary: bool = False):
    """Split each class into equal shards and deal ``k`` shards to every client.

    Each class is cut into ``S = clients * k / n_classes`` shards. The list of
    shard tokens (each class repeated ``S`` times) is shuffled and dealt ``k`` at a
    time, so every class is handed out exactly ``S`` times and a client may draw
    the same class twice. Examples left over when a class does not divide evenly
    into ``S`` shards are dropped and counted in the summary.
    """
    n_shards = spec.validate(dataset.n_classes)
    rng = np.random.default_rng(spec.seed)

    shards: Dict[int, List[np.ndarray]] = {}
    shard_sizes, dropped = {}, {}
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        size = idx.size // n_shards
        if size == 0:
            raise ValueError(
                f"class {c} has {idx.size} examples, need at least {n_shards} for {n_shards} shards"
            )
        idx = rng.permutation(idx)
        shards[c] = [idx[j * size:(j + 1) * size] for j in range(n_shards)]
        shard_sizes[c] = int(size)
        dropped[c] = int(idx.size - size * n_shards)

    tokens = rng.permutation(np.repeat(np.arange(dataset.n_classes), n_shards))
    next_shard = {c: 0 for c in range(dataset.n_classes)}
    k = spec.classes_per_client

    out, client_classes = [], []
    hasher = hashlib.sha256()
    for cid in range(spec.clients):
        drawn = tokens[cid * k:(cid + 1) * k].tolist()
        parts = []
        for c in drawn:
            parts.append(shards[c][next_shard[c]])
            next_shard[c] += 1
        idx = rng.permutation(np.concatenate(parts))
        if idx.size < 2:
            raise ValueError(f"client {cid} holds {idx.size} example(s); cannot split train/test")
        n_train = min(max(int(round(spec.train_fraction * idx.size)), 1), idx.size - 1)
        train_idx, test_idx = idx[:n_train], idx[n_train:]
        out.append(ClientShard(cid, dataset.subset(train_idx), dataset.subset(test_idx),
                               train_idx, test_idx))
        client_classes.append(sorted(drawn))
        hasher.update(np.int64(cid).tobytes())
        hasher.update(train_idx.astype(np.int64).tobytes())
        hasher.update(b"|")
        hasher.update(test_idx.astype(np.int64).tobytes())

    if not return_summary:
        return out
    summary = PartitionSummary(spec.clients, k, n_shards, shard_sizes, dropped,
                               client_classes, hasher.hexdigest())
    return out, summary


def synth_mixture(classes: int, dim: int, per_class: int, separation: float,
                  seed: Optional[int] = 0) -> LabeledDataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means are drawn at random and the whole configuration is rescaled so
    the closest pair of means sits exactly ``separation`` apart.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1 or dim < 1:
        raise ValueError("per_class and dim must be positive")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    closest = gaps[np.triu_indices(classes, k=1)].min()
    means *= separation / closest
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], classes)


def load_csv(path: Union[str, Path], n_classes: int,
             max_value: Optional[float] = None) -> LabeledDataset:
    """Read ``label,f1,f2,...`` rows. Errors name the 1-based row number."""
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ValueError(f"row {lineno}: need a label and at least one feature")
            elif len(row) != width:
                raise ValueError(f"row {lineno}: expected {width} fields, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(cell) for cell in row[1:]]
            except ValueError as exc:
                raise ValueError(f"row {lineno}: non-numeric field ({exc})") from None
            if not 0 <= label < n_classes:
                raise ValueError(f"row {lineno}: label {label} outside [0, {n_classes})")
            labels.append(label)
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.array(rows, dtype=np.float64)
    if max_value is not None:
        features = features / float(max_value)
    return LabeledDataset(features, np.array(labels, dtype=np.int64), n_classes)


def write_csv(dataset: LabeledDataset, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])
