"""Feature statistics exchange: local mean/variance, pooled aggregation, z-scoring."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import records
from .data import DataError, LabeledDataset

DEFAULT_EPS = 1e-8


def _vector(values, name: str) -> np.ndarray:
    v = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise DataError(f"{name} contains non-finite entries")
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class LocalStats:
    """Per-feature mean and population variance of one client's data."""

    client_id: int
    count: int
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _vector(self.mean, "mean"))
        object.__setattr__(self, "variance", _vector(self.variance, "variance"))
        if self.count < 1:
            raise DataError("count must be at least 1")
        if self.mean.shape != self.variance.shape:
            raise DataError("mean and variance lengths differ")
        if np.any(self.variance < 0):
            raise DataError("negative variance")

    @property
    def num_features(self) -> int:
        return self.mean.shape[0]

    def to_record(self) -> dict:
        return {
            "version": records.FORMAT_VERSION,
            "kind": "local_stats",
            "client_id": int(self.client_id),
            "count": int(self.count),
            "mean": self.mean,
            "variance": self.variance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LocalStats":
        try:
            if rec.get("kind") == "global_stats":
                return cls(int(rec.get("client_id", 0)), int(rec["total_count"]), rec["mean"], rec["variance"])
            return cls(int(rec["client_id"]), int(rec["count"]), rec["mean"], rec["variance"])
        except (KeyError, TypeError) as exc:
            raise records.RecordError(f"malformed statistics record: {exc}") from None


@dataclass(frozen=True)
class GlobalStats:
    total_count: int
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _vector(self.mean, "mean"))
        object.__setattr__(self, "variance", _vector(self.variance, "variance"))
        if self.mean.shape != self.variance.shape:
            raise DataError("mean and variance lengths differ")
        if np.any(self.variance < 0):
            raise DataError("negative variance")

    @property
    def num_features(self) -> int:
        return self.mean.shape[0]

    def std(self, eps: float = DEFAULT_EPS) -> np.ndarray:
        return np.maximum(np.sqrt(self.variance), eps)

    def to_record(self) -> dict:
        return {
            "version": records.FORMAT_VERSION,
            "kind": "global_stats",
            "total_count": int(self.total_count),
            "mean": self.mean,
            "variance": self.variance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GlobalStats":
        try:
            count = rec["total_count"] if "total_count" in rec else rec["count"]
            return cls(int(count), rec["mean"], rec["variance"])
        except (KeyError, TypeError) as exc:
            raise records.RecordError(f"malformed statistics record: {exc}") from None


def compute_local_stats(ds: LabeledDataset | np.ndarray, client_id: int = 0) -> LocalStats:
    """Mean and population (divide-by-count) variance of every feature column."""
    x = ds.features if isinstance(ds, LabeledDataset) else np.asarray(ds, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot compute statistics of an empty dataset")
    mean = x.mean(axis=0)
    variance = ((x - mean) ** 2).mean(axis=0)
    return LocalStats(client_id, x.shape[0], mean, variance)


def aggregate_stats(stats: Sequence[LocalStats]) -> GlobalStats:
    """Pool client statistics into the statistics of the concatenated data.

    With weights n_i = count_i / total::

        mean     = sum_i n_i * mean_i
        variance = sum_i n_i * (variance_i + (mean_i - mean)^2)

    Clients are combined in ascending ``client_id`` order in extended
    precision, so the result does not depend on arrival order.
    """
    if not stats:
        raise DataError("no local statistics to aggregate")
    dims = {s.num_features for s in stats}
    if len(dims) != 1:
        raise DataError(f"local statistics disagree on feature count: {sorted(dims)}")
    ids = [s.client_id for s in stats]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate client_id in local statistics")
    ordered = sorted(stats, key=lambda s: s.client_id)
    total = sum(int(s.count) for s in ordered)
    if len(ordered) == 1:
        only = ordered[0]
        return GlobalStats(total, only.mean, only.variance)

    wide = np.longdouble
    w = [wide(s.count) / wide(total) for s in ordered]
    mean = np.zeros(ordered[0].num_features, dtype=wide)
    for wi, s in zip(w, ordered):
        mean += wi * s.mean.astype(wide)
    var = np.zeros_like(mean)
    for wi, s in zip(w, ordered):
        var += wi * (s.variance.astype(wide) + (s.mean.astype(wide) - mean) ** 2)
    return GlobalStats(total, mean.astype(np.float64), var.astype(np.float64))


def normalize(ds: LabeledDataset, g: GlobalStats, eps: float = DEFAULT_EPS) -> LabeledDataset:
    """z-score every column with the given statistics; constant columns map to 0."""
    if ds.num_features != g.num_features:
        raise DataError(f"dataset has {ds.num_features} features, statistics have {g.num_features}")
    return ds.with_features((ds.features - g.mean) / g.std(eps))


def denormalize(ds: LabeledDataset, g: GlobalStats, eps: float = DEFAULT_EPS) -> LabeledDataset:
    if ds.num_features != g.num_features:
        raise DataError(f"dataset has {ds.num_features} features, statistics have {g.num_features}")
    return ds.with_features(ds.features * g.std(eps) + g.mean)


def as_global(local: LocalStats) -> GlobalStats:
    """Treat one client's statistics as the normalization reference (local z-scoring)."""
    return GlobalStats(local.count, local.mean, local.variance)


def read_stats_file(path: str | Path) -> list[LocalStats]:
    out = [LocalStats.from_record(r) for r in records.read_records(path)]
    if not out:
        raise records.RecordError(f"{path}: no statistics records")
    return out
