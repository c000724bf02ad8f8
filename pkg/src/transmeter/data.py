"""Tabular datasets: CSV ingestion, splits, z-normalization, folds, batching."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, LoadError, ShapeError


@dataclass(eq=False)
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.size:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.size} labels"
            )
        if self.labels.size < 1 or self.features.shape[1] < 1:
            raise InvalidArgumentError(f"dataset {self.name!r} is empty")
        if not np.isin(self.labels, (0, 1)).all():
            raise InvalidArgumentError("labels must be 0 or 1")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def size(self) -> int:
        return self.labels.size

    def subset(self, idx: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(name or self.name, self.features[idx], self.labels[idx])

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(self.name, features, self.labels.copy())


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        if ds.dim != self.mean.size:
            raise ShapeError(f"dataset {ds.name!r} has dim {ds.dim}, stats have {self.mean.size}")
        return ds.with_features((ds.features - self.mean) / self.std)


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray

    def indices(self, fold: int) -> Tuple[np.ndarray, np.ndarray]:
        """(train indices, validation indices) for one fold."""
        val = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, val

    def sizes(self) -> List[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


@dataclass
class Batch:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    target_labels: np.ndarray

    @property
    def n_source(self) -> int:
        return self.source_labels.size

    @property
    def n_target(self) -> int:
        return self.target_labels.size

    def __len__(self) -> int:
        return self.n_source + self.n_target

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.source_labels, self.target_labels])

    @property
    def domain_labels(self) -> np.ndarray:
        """0 for source rows, 1 for target rows; source rows come first."""
        return np.concatenate([np.zeros(self.n_source), np.ones(self.n_target)])

    @property
    def origin_dims(self) -> np.ndarray:
        s = self.source_features.shape[1] if self.source_features.ndim == 2 else 0
        t = self.target_features.shape[1] if self.target_features.ndim == 2 else 0
        return np.concatenate([np.full(self.n_source, s), np.full(self.n_target, t)])

    @classmethod
    def from_datasets(cls, source: Optional[Dataset], target: Optional[Dataset]) -> "Batch":
        def parts(ds, width):
            if ds is None:
                return np.zeros((0, width)), np.zeros(0, dtype=np.int64)
            return ds.features, ds.labels

        sx, sy = parts(source, source.dim if source is not None else 0)
        tx, ty = parts(target, target.dim if target is not None else 0)
        return cls(sx, sy, tx, ty)


# ingestion ----------------------------------------------------------------


def load_csv(path, label_column: str, positive_label: str, name: Optional[str] = None) -> Dataset:
    """Read a headed CSV; rows whose label equals ``positive_label`` become 1."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise LoadError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_idx]
        if not feature_cols:
            raise LoadError(f"{path}: no feature columns")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}")
            values = []
            for i in feature_cols:
                cell = row[i].strip()
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise LoadError(
                        f"{path}: row {line_no}, column {header[i]!r}: {cell!r} is not a finite number"
                    )
                values.append(v)
            rows.append(values)
            labels.append(row[label_idx].strip())
    if not rows:
        raise LoadError(f"{path}: no data rows")
    distinct = sorted(set(labels))
    if len(distinct) > 2:
        raise LoadError(
            f"{path}: label column {label_column!r} has {len(distinct)} distinct values {distinct[:5]}"
        )
    y = np.array([1 if v == positive_label else 0 for v in labels])
    return Dataset(name or path.stem, np.array(rows, dtype=np.float64), y)


def write_csv(ds: Dataset, path, label_column: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(ds.dim)] + [label_column])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass
class RegistryEntry:
    name: str
    csv_path: Path
    label_column: str
    positive_label: str
    checkpoint: Optional[Path] = None

    def load(self) -> Dataset:
        return load_csv(self.csv_path, self.label_column, self.positive_label, name=self.name)


@dataclass
class Registry:
    path: Path
    entries: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> RegistryEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise LoadError(f"no dataset named {name!r} in registry {self.path}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> List[str]:
        return list(self.entries)

    def checkpoint_path(self, name: str) -> Path:
        entry = self[name]
        if entry.checkpoint is not None:
            return entry.checkpoint
        return self.path.parent / "checkpoints" / f"{name}.json"


def load_registry(path) -> Registry:
    """Parse an INI registry: one ``[name]`` section per dataset.

    Keys: ``csv`` (required), ``label_column`` (required), ``positive_label``
    (default ``1``), ``checkpoint`` (optional). Relative paths resolve
    against the registry file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"registry file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise LoadError(f"{path}: {exc}") from None
    base = path.parent
    entries = {}
    for name in parser.sections():
        sec = parser[name]
        missing = [k for k in ("csv", "label_column") if k not in sec]
        if missing:
            raise LoadError(f"{path}: entry [{name}] lacks {', '.join(missing)}")
        ckpt = sec.get("checkpoint")
        entries[name] = RegistryEntry(
            name=name,
            csv_path=base / sec["csv"],
            label_column=sec["label_column"],
            positive_label=sec.get("positive_label", "1"),
            checkpoint=base / ckpt if ckpt else None,
        )
    return Registry(path, entries)


# transforms ---------------------------------------------------------------


def split(ds: Dataset, train_fraction: float, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = ds.size
    # 690 * 0.7 is 482.99999999999994 in binary; the nudge keeps exact products exact
    n_train = int(math.floor(n * train_fraction + 1e-9))
    if n < 2 or n_train < 1 or n_train >= n:
        raise InvalidArgumentError(f"cannot split {n} rows with fraction {train_fraction}")
    perm = rng.permutation(n)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def fit_norm_stats(train: Dataset) -> NormStats:
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std)


def znormalize(train: Dataset, others: Sequence[Dataset] = ()) -> Tuple[List[Dataset], NormStats]:
    """Standardize with statistics from ``train`` only; returns [train, *others]."""
    for other in others:
        if other.dim != train.dim:
            raise ShapeError(f"dimension mismatch: {train.dim} vs {other.dim}")
    stats = fit_norm_stats(train)
    return [stats.apply(d) for d in (train, *others)], stats


def make_folds(ds: Dataset, k: int, rng: np.random.Generator) -> FoldPlan:
    if k < 2:
        raise InvalidArgumentError(f"k must be >= 2, got {k}")
    if ds.size < k:
        raise InvalidArgumentError(f"cannot make {k} folds from {ds.size} rows")
    perm = rng.permutation(ds.size)
    assignments = np.empty(ds.size, dtype=np.int64)
    assignments[perm] = np.arange(ds.size) % k
    return FoldPlan(k, assignments)


def flip_labels(ds: Dataset) -> Dataset:
    return Dataset(ds.name, ds.features, 1 - ds.labels)


def balanced_batches(
    source: Dataset, target: Dataset, per_domain: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """One epoch of batches holding ``per_domain`` rows from each domain.

    The larger pool is walked once (trailing remainder dropped); the smaller
    pool is reshuffled each time it runs out.
    """
    if per_domain < 1:
        raise InvalidArgumentError("per_domain must be >= 1")
    if source.size == 0 or target.size == 0:
        raise InvalidArgumentError("both domains need at least one row")
    per_domain = min(per_domain, source.size, target.size)
    n_batches = max(source.size, target.size) // per_domain
    s_iter = _cycling_indices(source.size, per_domain, rng)
    t_iter = _cycling_indices(target.size, per_domain, rng)
    for _ in range(n_batches):
        si = next(s_iter)
        ti = next(t_iter)
        yield Batch(source.features[si], source.labels[si], target.features[ti], target.labels[ti])


def _cycling_indices(n: int, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield chunks of ``size`` indices from successive shuffles of range(n)."""
    buf = np.zeros(0, dtype=np.int64)
    while True:
        while buf.size < size:
            buf = np.concatenate([buf, rng.permutation(n)])
        chunk, buf = buf[:size], buf[size:]
        yield chunk
