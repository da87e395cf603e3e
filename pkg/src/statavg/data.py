"""Tabular datasets: CSV ingestion, client partitioning, SMOTE, synthetic non-iid data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import records

log = logging.getLogger(__name__)

DRIFT_MODES = ("covariate_shift", "concept_drift", "none")


class DataError(ValueError):
    """Invalid input data or an impossible data operation."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (D x S) with integer class labels.

    ``meta`` carries provenance that downstream steps may want to audit
    (dropped-row counts, SMOTE parent pairs, label encoding order).
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"labels length {y.shape} does not match {x.shape[0]} feature rows")
        if x.shape[1] != len(self.feature_names):
            raise DataError(f"{x.shape[1]} feature columns but {len(self.feature_names)} names")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain NaN or Inf")
        if y.size and (y.min() < 0 or y.max() >= len(self.class_names)):
            raise DataError("label outside the class index range")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.features[rows], self.labels[rows], self.feature_names, self.class_names)

    def with_features(self, features: np.ndarray) -> "LabeledDataset":
        return replace(self, features=features, meta=dict(self.meta))


@dataclass(frozen=True)
class ClientPartition:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    weight: float
    # Data the client computes its local statistics on; defaults to ``train``.
    stats_data: LabeledDataset | None = None

    @property
    def stats_source(self) -> LabeledDataset:
        return self.train if self.stats_data is None else self.stats_data


@dataclass(frozen=True)
class SynthSpec:
    num_clients: int = 5
    samples_per_client: int = 2500
    num_features: int = 12
    num_classes: int = 4
    shift_magnitude: float = 3.0
    scale_magnitude: float = 1.0
    drift_mode: str = "covariate_shift"
    seed: int = 0
    # Spread of class centers relative to the unit within-class std.
    class_separation: float = 2.0
    train_fraction: float = 0.8

    def __post_init__(self):
        for name in ("num_clients", "samples_per_client", "num_features"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.num_classes < 2:
            raise DataError("num_classes must be at least 2")
        for name in ("shift_magnitude", "scale_magnitude", "class_separation"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DataError(f"{name} must be finite and nonnegative")
        if self.drift_mode not in DRIFT_MODES:
            raise DataError(f"drift_mode must be one of {DRIFT_MODES}")


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_real(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(
    path: str | Path,
    label_column: str,
    feature_columns: Sequence[str] | None = None,
    strict: bool = False,
) -> LabeledDataset:
    """Read a headed CSV into a :class:`LabeledDataset`.

    Labels are encoded in first-occurrence order. Rows whose selected
    feature cells do not parse as finite reals are dropped and counted in
    ``meta["dropped_rows"]`` (``strict=True`` raises instead). A feature
    column in which no cell parses is rejected as non-numeric.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header")
    label_idx = header.index(label_column)
    if feature_columns is None:
        feature_columns = [h for h in header if h != label_column]
    missing = [c for c in feature_columns if c not in header]
    if missing:
        raise DataError(f"{path}: feature columns not in header: {missing}")
    if label_column in feature_columns:
        raise DataError("label column cannot also be a feature")
    if not feature_columns:
        raise DataError(f"{path}: no feature columns selected")
    feat_idx = [header.index(c) for c in feature_columns]

    parsed = np.full((len(rows), len(feat_idx)), np.nan)
    raw_labels: list[str | None] = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raw_labels.append(None)
            continue
        raw_labels.append(row[label_idx].strip() or None)
        for c, j in enumerate(feat_idx):
            v = _parse_real(row[j].strip())
            if v is not None:
                parsed[r, c] = v

    if rows:
        dead = [feature_columns[c] for c in range(len(feat_idx)) if np.all(np.isnan(parsed[:, c]))]
        if dead:
            raise DataError(f"{path}: non-numeric feature column(s): {dead}")

    good = np.array([lab is not None for lab in raw_labels], dtype=bool)
    if rows:
        good &= ~np.isnan(parsed).any(axis=1)
    dropped = int(len(rows) - good.sum())
    if dropped and strict:
        bad = int(np.flatnonzero(~good)[0]) + 2
        raise DataError(f"{path}:{bad}: unparseable row (strict mode)")
    if not good.any():
        raise DataError(f"{path}: no usable rows")
    if dropped:
        log.warning("%s: dropped %d unparseable row(s)", path, dropped)

    class_names: list[str] = []
    index: dict[str, int] = {}
    labels = []
    for lab, ok in zip(raw_labels, good):
        if not ok:
            continue
        if lab not in index:
            index[lab] = len(class_names)
            class_names.append(lab)
        labels.append(index[lab])

    return LabeledDataset(
        parsed[good],
        np.array(labels, dtype=np.int64),
        tuple(feature_columns),
        tuple(class_names),
        meta={"source": str(path), "dropped_rows": dropped, "label_order": list(class_names)},
    )


def write_csv(ds: LabeledDataset, path: str | Path, label_column: str = "label") -> None:
    """Write ``ds`` in the schema :func:`load_csv` reads."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*ds.feature_names, label_column])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([*(records.format_number(v) for v in x), ds.class_names[y]])


# ---------------------------------------------------------------------------
# Partitioning and splitting


def stratified_partition(ds: LabeledDataset, n_parts: int, seed: int) -> list[LabeledDataset]:
    """Deal each class's shuffled rows round-robin across ``n_parts`` partitions.

    The dealing position carries over between classes so partition sizes
    also stay within one sample of each other.
    """
    if n_parts < 1:
        raise DataError("number of partitions must be at least 1")
    counts = ds.class_counts()
    short = [ds.class_names[c] for c in range(ds.num_classes) if counts[c] < n_parts]
    if short:
        raise DataError(f"classes with fewer than {n_parts} samples: {short}")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_parts)]
    start = 0
    for c in range(ds.num_classes):
        rows = rng.permutation(np.flatnonzero(ds.labels == c))
        for k in range(n_parts):
            buckets[k].append(rows[(k - start) % n_parts :: n_parts])
        start = (start + len(rows)) % n_parts
    return [ds.subset(np.sort(np.concatenate(b))) for b in buckets]


def train_test_split(
    ds: LabeledDataset, train_fraction: float, seed: int, stratified: bool = True
) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    if stratified:
        counts = ds.class_counts()
        tiny = [ds.class_names[c] for c in range(ds.num_classes) if 0 < counts[c] < 2]
        if tiny:
            raise DataError(f"classes with fewer than 2 samples cannot be split: {tiny}")
        groups = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    else:
        groups = [np.arange(ds.num_samples)]
    train, test = [], []
    for rows in groups:
        rows = rng.permutation(rows)
        # Guard against products such as 0.29 * 100 = 28.999999999999996.
        n_train = math.floor(train_fraction * len(rows) + 1e-9)
        train.append(rows[:n_train])
        test.append(rows[n_train:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


# ---------------------------------------------------------------------------
# SMOTE


def smote_upsample(
    ds: LabeledDataset, target_per_class: int | None = None, k: int = 5, seed: int = 0
) -> LabeledDataset:
    """Oversample minority classes up to ``target_per_class`` rows each.

    Synthetic rows ``x + u * (x_nn - x)`` are appended after the original
    rows; ``meta["smote_parents"]`` holds the (base, neighbour) row indices
    into ``ds`` for every synthetic row and ``meta["smote_u"]`` the
    interpolation weights. ``target_per_class=None`` balances every class
    to the majority count.
    """
    if k < 1:
        raise DataError("SMOTE k must be at least 1")
    counts = ds.class_counts()
    target = int(counts.max()) if target_per_class is None else int(target_per_class)
    rng = np.random.default_rng(seed)
    new_x, new_y, parents, weights = [], [], [], []
    for c in range(ds.num_classes):
        need = target - int(counts[c])
        if need <= 0:
            continue
        members = np.flatnonzero(ds.labels == c)
        if len(members) == 0:
            log.warning("SMOTE: class %r has no samples; left empty", ds.class_names[c])
            continue
        if len(members) < 2:
            raise DataError(f"SMOTE: class {ds.class_names[c]!r} has a single sample; cannot interpolate")
        k_eff = min(k, len(members) - 1)
        if k_eff < k:
            log.warning("SMOTE: k=%d clamped to %d for class %r", k, k_eff, ds.class_names[c])
        pts = ds.features[members]
        base = rng.integers(0, len(members), size=need)
        pick = rng.integers(0, k_eff, size=need)
        u = rng.random(need)
        neigh = _same_class_neighbours(pts, np.unique(base), k_eff)
        nn_local = np.array([neigh[b][p] for b, p in zip(base, pick)], dtype=np.int64)
        x0 = pts[base]
        x1 = pts[nn_local]
        new_x.append(x0 + u[:, None] * (x1 - x0))
        new_y.append(np.full(need, c, dtype=np.int64))
        parents.append(np.stack([members[base], members[nn_local]], axis=1))
        weights.append(u)

    if not new_x:
        out = replace(ds, meta={**ds.meta, "smote_parents": np.zeros((0, 2), np.int64), "smote_u": np.zeros(0)})
        return out
    return LabeledDataset(
        np.vstack([ds.features, *new_x]),
        np.concatenate([ds.labels, *new_y]),
        ds.feature_names,
        ds.class_names,
        meta={
            **ds.meta,
            "smote_parents": np.vstack(parents),
            "smote_u": np.concatenate(weights),
            "smote_k": k,
            "smote_target": target,
        },
    )


def _same_class_neighbours(pts: np.ndarray, queries: np.ndarray, k: int) -> dict[int, np.ndarray]:
    """k nearest neighbours (Euclidean, excluding the point itself) for each query row."""
    tree = cKDTree(pts)
    _, idx = tree.query(pts[queries], k=k + 1)
    idx = np.atleast_2d(idx)
    out = {}
    for q, row in zip(queries, idx):
        row = row[row != q]
        out[int(q)] = row[:k]
    return out


# ---------------------------------------------------------------------------
# Synthetic non-iid generator


def synth_noniid_generate(spec: SynthSpec) -> list[ClientPartition]:
    """Generate ``spec.num_clients`` client datasets with controlled feature skew.

    Base data are Gaussian class clusters (unit within-class variance,
    centers drawn once from the seed) with balanced labels.

    * ``none``: clients are iid draws; labels follow the nearest class center.
    * ``covariate_shift``: each client applies its own per-feature affine map
      ``x -> scale * x + offset`` to every sample, then labels follow the
      shared nearest-center rule on the mapped inputs. P_i(x) differs across
      clients while P(y|x) is common.
    * ``concept_drift``: each client adds class-dependent offsets; labels stay
      with the generating cluster, so P_i(x|y) differs across clients.

    Offsets are uniform in [-shift, shift]; scales log-uniform in
    [e^-scale, e^scale]. The realized draws are stored in each partition's
    ``train.meta`` (and returned by :func:`synth_metadata`).
    """
    rng = np.random.default_rng(spec.seed)
    n, s, c = spec.num_clients, spec.num_features, spec.num_classes
    centers = rng.normal(0.0, spec.class_separation, size=(c, s))
    offsets = rng.uniform(-spec.shift_magnitude, spec.shift_magnitude, size=(n, s))
    scales = np.exp(rng.uniform(-spec.scale_magnitude, spec.scale_magnitude, size=(n, s)))
    class_offsets = rng.uniform(-spec.shift_magnitude, spec.shift_magnitude, size=(n, c, s))
    if spec.drift_mode == "none":
        offsets = np.zeros_like(offsets)
        scales = np.ones_like(scales)
    if spec.drift_mode != "concept_drift":
        class_offsets = np.zeros_like(class_offsets)

    feature_names = tuple(f"f{j}" for j in range(s))
    class_names = tuple(f"class_{k}" for k in range(c))
    raw_sizes = []
    client_data = []
    for i in range(n):
        crng = np.random.default_rng([spec.seed, i + 1])
        latent = crng.permutation(np.arange(spec.samples_per_client) % c)
        x = centers[latent] + crng.standard_normal((spec.samples_per_client, s))
        if spec.drift_mode == "concept_drift":
            x = x + class_offsets[i][latent]
            y = latent
        else:
            x = x * scales[i] + offsets[i]
            y = _nearest_center(x, centers)
        client_data.append((x, y))
        raw_sizes.append(len(y))

    total = float(sum(raw_sizes))
    meta = {
        "seed": spec.seed,
        "drift_mode": spec.drift_mode,
        "centers": centers,
        "offsets": offsets,
        "scales": scales,
        "class_offsets": class_offsets,
    }
    parts = []
    for i, (x, y) in enumerate(client_data):
        local = LabeledDataset(x, y, feature_names, class_names)
        train, test = train_test_split(
            local, spec.train_fraction, seed=int(np.random.SeedSequence([spec.seed, i + 1, 7]).generate_state(1)[0]),
            stratified=_can_stratify(local),
        )
        train = replace(train, meta={**meta, "client_id": i + 1})
        parts.append(ClientPartition(i + 1, train, test, raw_sizes[i] / total))
    return parts


def _nearest_center(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _can_stratify(ds: LabeledDataset) -> bool:
    counts = ds.class_counts()
    return not np.any((counts > 0) & (counts < 2))


def synth_metadata(parts: Sequence[ClientPartition], spec: SynthSpec) -> dict:
    """Structured sidecar describing a synthetic dataset."""
    meta = parts[0].train.meta
    return {
        "version": records.FORMAT_VERSION,
        "kind": "synth_metadata",
        "spec": {
            "num_clients": spec.num_clients,
            "samples_per_client": spec.samples_per_client,
            "num_features": spec.num_features,
            "num_classes": spec.num_classes,
            "shift_magnitude": spec.shift_magnitude,
            "scale_magnitude": spec.scale_magnitude,
            "drift_mode": spec.drift_mode,
            "seed": spec.seed,
            "class_separation": spec.class_separation,
            "train_fraction": spec.train_fraction,
        },
        "centers": meta["centers"],
        "offsets": meta["offsets"],
        "scales": meta["scales"],
        "class_offsets": meta["class_offsets"],
        "clients": [
            {"client_id": p.client_id, "train_rows": p.train.num_samples, "test_rows": p.test.num_samples,
             "weight": p.weight}
            for p in parts
        ],
    }
