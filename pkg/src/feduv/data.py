"""Synthetic datasets, CSV ingestion, client partitioners and mini-batching."""

from __future__ import annotations

import csv
import logging
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 100


class CsvFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain_tags: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} do not match {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.domain_tags is not None:
            self.domain_tags = np.asarray(self.domain_tags, dtype=np.int64)
            if self.domain_tags.shape != self.labels.shape:
                raise ValueError("domain_tags length must equal the number of samples")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        tags = None if self.domain_tags is None else self.domain_tags[idx]
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, tags)

    def class_counts(self, indices=None) -> np.ndarray:
        y = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(y, minlength=self.num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    input_dim: int = 32
    samples_per_class: int = 500
    cluster_spread: float = 1.0
    class_mean_scale: float = 2.0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 2 or self.samples_per_class < 1:
            raise ValueError("synthetic spec needs num_classes >= 2, input_dim >= 2, samples_per_class >= 1")
        if self.cluster_spread < 0 or self.class_mean_scale <= 0:
            raise ValueError("cluster_spread must be >= 0 and class_mean_scale > 0")


@dataclass(frozen=True)
class DomainTransform:
    rotation_plane: tuple[int, int] = (0, 1)
    angle: float = 0.0
    scale: float = 1.0
    bias: tuple[float, ...] | None = None

    def __post_init__(self):
        i, j = self.rotation_plane
        if i == j or i < 0 or j < 0:
            raise ValueError(f"rotation plane needs two distinct non-negative dims, got {self.rotation_plane}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def apply(self, x: np.ndarray) -> np.ndarray:
        i, j = self.rotation_plane
        if max(i, j) >= x.shape[1]:
            raise ValueError(f"rotation plane {self.rotation_plane} out of range for {x.shape[1]} dims")
        out = x.copy()
        c, s = np.cos(self.angle), np.sin(self.angle)
        out[:, i] = c * x[:, i] - s * x[:, j]
        out[:, j] = s * x[:, i] + c * x[:, j]
        out *= self.scale
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (x.shape[1],):
                raise ValueError(f"bias must have {x.shape[1]} entries")
            out += b
        return out


@dataclass
class PartitionPlan:
    assignments: list[np.ndarray]
    kind: str
    n_samples: int
    alpha: float | None = None
    backfilled: int = 0
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        if self.kind not in ("dirichlet", "iid", "by_domain"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if any(a.size == 0 for a in self.assignments):
            raise ValueError("every client needs at least one sample")
        allidx = np.concatenate(self.assignments) if self.assignments else np.empty(0, np.int64)
        if allidx.size != self.n_samples or not np.array_equal(np.sort(allidx), np.arange(self.n_samples)):
            raise ValueError("assignments are not an exact partition of the sample indices")

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def histograms(self, labels, num_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[a], minlength=num_classes) for a in self.assignments])


def gen_blobs(spec: SyntheticSpec, rng: RngStream) -> Dataset:
    gen = rng.generator()
    means = gen.standard_normal((spec.num_classes, spec.input_dim))
    means *= spec.class_mean_scale / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = gen.standard_normal((labels.size, spec.input_dim))
    return Dataset(means[labels] + spec.cluster_spread * noise, labels, spec.num_classes)


def apply_domain_shift(ds: Dataset, transforms: Sequence[DomainTransform], rng: RngStream) -> Dataset:
    """Split samples evenly at random into one domain per transform and apply it."""
    if not transforms:
        raise ValueError("need at least one domain transform")
    order = rng.generator().permutation(len(ds))
    tags = np.empty(len(ds), dtype=np.int64)
    features = ds.features.copy()
    for k, chunk in enumerate(np.array_split(order, len(transforms))):
        tags[chunk] = k
        features[chunk] = transforms[k].apply(ds.features[chunk])
    return Dataset(features, ds.labels.copy(), ds.num_classes, tags)


def iid_partition(n: int, num_clients: int, rng: RngStream) -> PartitionPlan:
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"cannot split {n} samples over {num_clients} clients")
    order = rng.generator().permutation(n)
    return PartitionPlan([np.sort(a) for a in np.array_split(order, num_clients)], "iid", n)


def _deal_dirichlet(labels: np.ndarray, num_clients: int, alpha: float, gen: np.random.Generator):
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = gen.permutation(np.flatnonzero(labels == cls))
        props = gen.dirichlet(np.full(num_clients, alpha))
        if not np.all(np.isfinite(props)):
            # Dir(alpha) underflow at tiny alpha: put the class on one client.
            props = np.zeros(num_clients)
            props[gen.integers(num_clients)] = 1.0
        # Rounding (not flooring) the cut points keeps the first and last clients unbiased.
        cuts = np.rint(np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].append(part)
    return [np.sort(np.concatenate(b)) if b else np.empty(0, np.int64) for b in buckets]


def dirichlet_partition(labels, num_clients: int, alpha: float, rng: RngStream) -> PartitionPlan:
    """Per-class client proportions drawn from Dir(alpha * 1_K).

    Redraws (up to ``MAX_RESAMPLES``) while any client is empty, then moves
    single samples from the largest clients into the empty ones.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"cannot split {n} samples over {num_clients} clients")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    for attempt in range(MAX_RESAMPLES):
        parts = _deal_dirichlet(labels, num_clients, alpha, rng.child(attempt).generator())
        if all(p.size for p in parts):
            return PartitionPlan(parts, "dirichlet", n, alpha)
    moved = 0
    for k in range(num_clients):
        if parts[k].size == 0:
            donor = max(range(num_clients), key=lambda j: (parts[j].size, -j))
            parts[k] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
            moved += 1
    note = f"backfilled {moved} empty client(s) after {MAX_RESAMPLES} Dirichlet redraws"
    logger.warning(note)
    return PartitionPlan(parts, "dirichlet", n, alpha, backfilled=moved, notes=[note])


def by_domain_partition(ds: Dataset, num_clients: int) -> PartitionPlan:
    if ds.domain_tags is None:
        raise ValueError("dataset has no domain tags")
    tags = np.unique(ds.domain_tags)
    if tags.size != num_clients or not np.array_equal(tags, np.arange(num_clients)):
        raise ValueError(f"expected domain tags 0..{num_clients - 1}, found {tags.tolist()}")
    return PartitionPlan([np.flatnonzero(ds.domain_tags == k) for k in range(num_clients)], "by_domain", len(ds))


def split_train_test(ds: Dataset, test_fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Class-stratified split; each class keeps at least one sample on both sides."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    gen = rng.generator()
    train_idx, test_idx = [], []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples; cannot stratify")
        idx = gen.permutation(idx)
        n_test = min(max(int(round(test_fraction * idx.size)), 1), idx.size - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(test_idx)))


def batches(indices, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("no indices to batch")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    order = idx[rng.generator().permutation(idx.size)]
    out = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    if out[-1].size == 1:
        warnings.warn("final mini-batch has a single sample; variance loss is degenerate for it", RuntimeWarning)
    return out


def _resolve_column(col, header: list[str] | None, ncols: int) -> int:
    if isinstance(col, str):
        if header is None:
            raise CsvFormatError(f"column {col!r} given by name but the file has no header")
        if col not in header:
            raise CsvFormatError(f"column {col!r} not in header {header}")
        return header.index(col)
    col = int(col)
    if not -ncols <= col < ncols:
        raise CsvFormatError(f"column index {col} out of range for {ncols} columns")
    return col % ncols


def load_csv_dataset(
    path,
    label_column: str | int = -1,
    feature_columns: Sequence[str | int] | None = None,
    header: bool = True,
) -> Dataset:
    """Read one sample per row; labels must be integers covering 0..max."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(lineno, row) for lineno, row in enumerate(csv.reader(fh), start=1) if row]
    names = None
    if header:
        if not rows:
            raise CsvFormatError(f"{path}: empty file")
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    ncols = len(names) if names is not None else len(rows[0][1])
    label_idx = _resolve_column(label_column, names, ncols)
    if feature_columns is None:
        feat_idx = [i for i in range(ncols) if i != label_idx]
    else:
        feat_idx = [_resolve_column(c, names, ncols) for c in feature_columns]
    if not feat_idx:
        raise CsvFormatError(f"{path}: no feature columns")
    features = np.empty((len(rows), len(feat_idx)))
    labels = np.empty(len(rows), dtype=np.int64)
    for r, (lineno, row) in enumerate(rows):
        if len(row) != ncols:
            raise CsvFormatError(f"{path}:{lineno}: expected {ncols} fields, got {len(row)}")
        try:
            features[r] = [float(row[i]) for i in feat_idx]
            raw = row[label_idx].strip()
            labels[r] = int(raw)
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
        if not np.all(np.isfinite(features[r])):
            raise CsvFormatError(f"{path}:{lineno}: non-finite feature value")
        if labels[r] < 0:
            raise CsvFormatError(f"{path}:{lineno}: negative label {labels[r]}")
    num_classes = int(labels.max()) + 1
    missing = sorted(set(range(num_classes)) - set(labels.tolist()))
    if missing:
        raise CsvFormatError(f"{path}: label space is not contiguous, missing {missing}")
    if num_classes < 2:
        raise CsvFormatError(f"{path}: need at least 2 classes")
    return Dataset(features, labels, num_classes)


def write_csv_dataset(ds: Dataset, path, label_name: str = "label") -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.input_dim)] + [label_name])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
    return path
