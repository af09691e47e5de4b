"""Datasets, the public/private split, and non-IID client partitions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError, PrivacyError


@dataclass
class Dataset:
    """Labeled feature matrix.

    ``index`` holds the row ids of the source dataset these rows came from,
    so partitions of partitions stay addressable. When ``labels_visible`` is
    false (the public split) reading ``labels`` raises; evaluation code uses
    :attr:`evaluation_labels` instead.
    """

    features: np.ndarray
    _labels: np.ndarray
    num_classes: int
    index: np.ndarray | None = None
    labels_visible: bool = True

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self._labels = np.asarray(self._labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DomainError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self._labels.shape[0]:
            raise DomainError("feature and label row counts differ")
        if self._labels.size and (self._labels.min() < 0 or self._labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        if self.index is None:
            self.index = np.arange(len(self._labels))
        self.index = np.asarray(self.index, dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        if not self.labels_visible:
            raise PrivacyError("labels of the public set are evaluation-only")
        return self._labels

    @property
    def evaluation_labels(self) -> np.ndarray:
        return self._labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, rows: Sequence[int] | np.ndarray, labels_visible: bool | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.features[rows],
            self._labels[rows],
            self.num_classes,
            index=self.index[rows],
            labels_visible=self.labels_visible if labels_visible is None else labels_visible,
        )

    def select_source_rows(self, source_rows: Sequence[int]) -> "Dataset":
        """Subset by source-row ids (values of ``index``)."""
        position = {int(r): i for i, r in enumerate(self.index)}
        try:
            rows = [position[int(r)] for r in source_rows]
        except KeyError as exc:
            raise DomainError(f"source row {exc.args[0]} is not part of this dataset") from None
        return self.subset(rows)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self._labels, minlength=self.num_classes)


@dataclass
class PartitionPlan:
    """Per-client source-row lists plus the public rows."""

    client_indices: list[list[int]]
    public_indices: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.client_indices = [sorted(int(i) for i in rows) for rows in self.client_indices]
        self.public_indices = sorted(int(i) for i in self.public_indices)
        for c, rows in enumerate(self.client_indices):
            if not rows:
                raise DomainError(f"client {c} received no samples")
        seen: set[int] = set()
        for rows in [*self.client_indices, self.public_indices]:
            overlap = seen.intersection(rows)
            if overlap or len(set(rows)) != len(rows):
                raise DomainError(f"partition index lists overlap (e.g. row {min(overlap or rows)})")
            seen.update(rows)

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def with_public(self, public_indices: Sequence[int]) -> "PartitionPlan":
        return PartitionPlan(self.client_indices, list(public_indices))

    def to_json(self) -> str:
        payload = {
            "clients": {str(c): rows for c, rows in enumerate(self.client_indices)},
            "public": self.public_indices,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        payload = json.loads(text)
        clients = payload["clients"]
        ordered = [clients[str(c)] for c in range(len(clients))]
        return cls(ordered, payload.get("public", []))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "PartitionPlan":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# generation and ingestion
# ---------------------------------------------------------------------------

def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Scaled simplex vertices when S <= d, otherwise points on a circle."""
    means = np.zeros((num_classes, dim))
    if num_classes <= dim:
        means[np.arange(num_classes), np.arange(num_classes)] = separation
    else:
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = separation * np.cos(angles)
        means[:, 1] = separation * np.sin(angles)
    return means


def generate_mixture(
    num_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed: int,
    separation: float = 3.0,
) -> Dataset:
    """Isotropic Gaussian blob per class, rows grouped by class."""
    if num_classes < 2 or dim < 2:
        raise DomainError("need at least 2 classes and 2 feature dimensions")
    if n_per_class <= 0:
        raise DomainError(f"n_per_class must be positive, got {n_per_class}")
    if spread < 0 or separation <= 0:
        raise DomainError("spread must be >= 0 and separation > 0")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim, separation)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.standard_normal((labels.size, dim))
    features = means[labels] + spread * noise
    return Dataset(features, labels, num_classes)


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read ``label,f1,...,fd`` rows. A first row starting with ``label`` is a header."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    labels: list[int] = []
    features: list[list[float]] = []
    arity = None
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if lineno == 1 and row[0].strip().lower() == "label":
            continue
        if len(row) < 2:
            raise ParseError("row needs a label and at least one feature", lineno)
        if arity is None:
            arity = len(row)
        elif len(row) != arity:
            raise ParseError(f"expected {arity} columns, found {len(row)}", lineno)
        try:
            label_value = float(row[0])
        except ValueError:
            raise ParseError(f"non-numeric label {row[0]!r}", lineno) from None
        if label_value != int(label_value) or label_value < 0:
            raise ParseError(f"label must be a non-negative integer, got {row[0]!r}", lineno)
        try:
            features.append([float(cell) for cell in row[1:]])
        except ValueError as exc:
            raise ParseError(f"non-numeric feature ({exc})", lineno) from None
        labels.append(int(label_value))
    if not labels:
        raise DomainError(f"{path} contains no data rows")
    s = max(labels) + 1 if num_classes is None else num_classes
    return Dataset(np.array(features), np.array(labels), s)


def save_csv(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(ds.evaluation_labels, ds.features):
            writer.writerow([int(label), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _apportion(total: int, weights: np.ndarray, minimum: int = 0) -> np.ndarray:
    """Integer shares of ``total`` proportional to ``weights`` (largest remainder)."""
    weights = np.asarray(weights, dtype=np.float64)
    base = np.full(weights.size, minimum, dtype=np.int64)
    rest = total - base.sum()
    if rest < 0:
        raise DomainError(f"cannot give {minimum} to each of {weights.size} parts out of {total}")
    share = weights / weights.sum() * rest
    floors = np.floor(share).astype(np.int64)
    remainder = rest - floors.sum()
    # stable sort -> ties go to the lowest index
    order = np.argsort(-(share - floors), kind="stable")
    floors[order[:remainder]] += 1
    return base + floors


def stratified_split(ds: Dataset, n_first: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row positions ``(first, rest)`` with ``first`` class-stratified of size ``n_first``."""
    if not 0 < n_first < ds.n:
        raise DomainError(f"split size must lie in (0, {ds.n}), got {n_first}")
    rng = np.random.default_rng(seed)
    labels = ds.evaluation_labels
    counts = np.bincount(labels, minlength=ds.num_classes)
    present = np.flatnonzero(counts)
    take = _apportion(n_first, counts[present])
    first = []
    for cls, k in zip(present, take):
        rows = np.flatnonzero(labels == cls)
        first.extend(rng.permutation(rows)[:k])
    first = np.sort(np.asarray(first, dtype=np.int64))
    rest = np.setdiff1d(np.arange(ds.n), first)
    return first, rest


def split_public(ds: Dataset, public_n: int, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified public split; public labels become evaluation-only."""
    if public_n >= ds.n:
        raise DomainError(f"public_n={public_n} must be smaller than the dataset size {ds.n}")
    first, rest = stratified_split(ds, public_n, seed)
    return ds.subset(first, labels_visible=False), ds.subset(rest)


def _repair_empty(assignment: list[list[int]]) -> None:
    for c in range(len(assignment)):
        while not assignment[c]:
            donor = max(range(len(assignment)), key=lambda j: (len(assignment[j]), -j))
            if len(assignment[donor]) <= 1:
                raise DomainError("not enough samples to give every client at least one")
            assignment[c].append(assignment[donor].pop())


def dirichlet_partition(ds: Dataset, clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Per class, split rows over clients by Dirichlet(alpha) proportions."""
    if clients < 2:
        raise DomainError(f"need at least 2 clients, got {clients}")
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if ds.n < clients:
        raise DomainError(f"{ds.n} samples cannot cover {clients} clients")
    rng = np.random.default_rng(seed)
    labels = ds.evaluation_labels
    assignment: list[list[int]] = [[] for _ in range(clients)]
    for cls in range(ds.num_classes):
        rows = rng.permutation(np.flatnonzero(labels == cls))
        if rows.size == 0:
            continue
        proportions = rng.dirichlet(np.full(clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * rows.size).astype(np.int64)
        for c, part in enumerate(np.split(rows, cuts)):
            assignment[c].extend(int(r) for r in part)
    _repair_empty(assignment)
    return PartitionPlan([[int(ds.index[r]) for r in rows] for rows in assignment])


def pathological_partition(ds: Dataset, clients: int, k_classes: int, seed: int) -> PartitionPlan:
    """Each client gets shards of exactly ``k_classes`` classes, all classes covered.

    Classes are dealt round-robin from a seeded permutation so consecutive
    clients hold consecutive windows of it; shard sizes within a class follow
    seeded multipliers in [0.5, 1.5].
    """
    labels = ds.evaluation_labels
    present = np.flatnonzero(np.bincount(labels, minlength=ds.num_classes))
    s = present.size
    if clients < 1 or not 1 <= k_classes <= s:
        raise DomainError(f"k_classes must lie in [1, {s}], got {k_classes}")
    if clients * k_classes < s:
        raise DomainError(f"{clients} clients x {k_classes} classes cannot cover {s} classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(present)
    holders: dict[int, list[int]] = {int(c): [] for c in present}
    for client in range(clients):
        for j in range(k_classes):
            holders[int(order[(client * k_classes + j) % s])].append(client)
    multipliers = rng.uniform(0.5, 1.5, size=(clients, ds.num_classes))
    assignment: list[list[int]] = [[] for _ in range(clients)]
    for cls in sorted(holders):
        owners = holders[cls]
        rows = rng.permutation(np.flatnonzero(labels == cls))
        if rows.size < len(owners):
            raise DomainError(f"class {cls} has {rows.size} samples for {len(owners)} holders")
        sizes = _apportion(rows.size, multipliers[owners, cls], minimum=1)
        for owner, part in zip(owners, np.split(rows, np.cumsum(sizes)[:-1])):
            assignment[owner].extend(int(r) for r in part)
    return PartitionPlan([[int(ds.index[r]) for r in rows] for rows in assignment])
