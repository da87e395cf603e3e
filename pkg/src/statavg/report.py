"""Plot-ready tables derived from a run directory."""

from __future__ import annotations

import csv
import re
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import records
from .data import ClientPartition, DataError
from .experiment import build_partitions, load_run_config
from .metrics import ConfusionMatrix
from .stats import compute_local_stats


def read_history(run_dir: str | Path) -> dict[str, list[dict]]:
    path = Path(run_dir) / "history.jsonl"
    if not path.is_file():
        raise DataError(f"{run_dir}: missing history.jsonl (not a train run directory?)")
    out: dict[str, list[dict]] = defaultdict(list)
    for rec in records.read_records(path):
        out[rec["strategy"]].append(rec)
    return dict(out)


def write_curves(history: dict[str, list[dict]], out: Path) -> dict[str, Path]:
    """One ``curve_<strategy>.csv`` per strategy: round, mean accuracy, per-client accuracies."""
    paths = {}
    for strategy, recs in history.items():
        n_clients = len(recs[0]["per_client_accuracy"])
        path = out / f"curve_{strategy}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "mean_test_accuracy", "mean_train_loss",
                        *(f"client_{i + 1}" for i in range(n_clients))])
            for r in recs:
                w.writerow([r["round"], records.format_number(r["mean_test_accuracy"]),
                            records.format_number(r["mean_train_loss"]),
                            *(records.format_number(a) for a in r["per_client_accuracy"])])
        paths[strategy] = path
    return paths


def client_feature_table(parts: Sequence[ClientPartition], features: Sequence[str]) -> list[dict]:
    """Per-client mean and population variance of the chosen features."""
    names = parts[0].train.feature_names
    cols = _feature_indices(names, features)
    rows = []
    for f, j in zip(features, cols):
        for p in parts:
            st = compute_local_stats(p.train, p.client_id)
            rows.append({"feature": f, "client_id": p.client_id,
                         "mean": float(st.mean[j]), "variance": float(st.variance[j])})
    return rows


def feature_histograms(parts: Sequence[ClientPartition], feature: str, label: str | None = None,
                       bins: int = 30) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Histogram of one feature per client on bin edges shared by all clients.

    With ``label`` set only training rows of that class are counted.
    """
    (j,) = _feature_indices(parts[0].train.feature_names, [feature])
    values = {}
    for p in parts:
        mask = np.ones(p.train.num_samples, dtype=bool)
        if label is not None:
            if label not in p.train.class_names:
                raise DataError(f"unknown class label {label!r}")
            mask = p.train.labels == p.train.class_names.index(label)
        values[p.client_id] = p.train.features[mask, j]
    pooled = np.concatenate(list(values.values()))
    if pooled.size == 0:
        raise DataError(f"no training rows for label {label!r}")
    edges = np.histogram_bin_edges(pooled, bins=bins)
    return edges, {cid: np.histogram(v, bins=edges)[0] for cid, v in values.items()}


def _feature_indices(names: Sequence[str], features: Sequence[str]) -> list[int]:
    missing = [f for f in features if f not in names]
    if missing:
        raise DataError(f"unknown feature(s): {missing}")
    return [list(names).index(f) for f in features]


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def generate_report(run_dir: str | Path, out_dir: str | Path | None = None,
                    features: Sequence[str] | None = None, label: str | None = None,
                    bins: int = 30, stage: str = "raw", figures: bool = True) -> list[Path]:
    """Write curve CSVs, optional histogram/statistics tables, and figures; return written paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    history = read_history(run_dir)
    written = list(write_curves(history, out).values())

    if figures:
        from . import plotting

        curves = {s: ([r["round"] for r in recs], [r["mean_test_accuracy"] for r in recs])
                  for s, recs in history.items()}
        written.append(plotting.plot_accuracy_curves(curves, out / "accuracy_curves.png"))
        for s in history:
            cm_path = run_dir / "confusion" / f"{s}.csv"
            if cm_path.is_file():
                written.append(plotting.plot_confusion(ConfusionMatrix.read_csv(cm_path),
                                                       out / f"confusion_{s}.png", title=s))

    if features:
        if stage not in ("raw", "smote"):
            raise DataError("stage must be 'raw' or 'smote'")
        cfg = load_run_config(run_dir)
        parts = build_partitions(cfg, smote=stage == "smote" and cfg.smote_enabled)
        table = client_feature_table(parts, features)
        path = out / "client_feature_stats.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "client_id", "mean", "variance"])
            for r in table:
                w.writerow([r["feature"], r["client_id"], records.format_number(r["mean"]),
                            records.format_number(r["variance"])])
        written.append(path)
        tag = "all" if label is None else _slug(label)
        for f in features:
            edges, counts = feature_histograms(parts, f, label, bins)
            for cid, c in counts.items():
                path = out / f"hist_{_slug(f)}_{tag}_{stage}_client{cid}.csv"
                with open(path, "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["bin_left", "bin_right", "count"])
                    for lo, hi, n in zip(edges[:-1], edges[1:], c):
                        w.writerow([records.format_number(lo), records.format_number(hi), int(n)])
                written.append(path)
            if figures:
                from . import plotting

                title = f"{f} | {label}" if label is not None else f
                written.append(plotting.plot_histograms(edges, counts, out / f"hist_{_slug(f)}_{tag}_{stage}.png",
                                                        xlabel=f, title=title))
    return written
