"""Run configuration, data pipeline and run-directory output for ``statavg train``.

Configuration is an INI file::

    [run]
    seed = 7
    clients = 5

    [data]
    source = csv            ; or synth
    path = ton_iot_linux_memory.csv
    label_column = type
    features = MINFLT, MAJFLT, VSTEXT, VSIZE, RSIZE, VGROW, RGROW, MEM

    [federation]
    strategies = StatAvg, FedAvg, FedLN, FedBN
    rounds = 50
    local_epochs = 2
    batch_size = 512
    learning_rate = 0.002

    [strategy.FedBN]
    learning_rate = 0.001   ; per-strategy overrides

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn, records
from .data import (
    ClientPartition, DataError, SynthSpec, load_csv, smote_upsample, stratified_partition, synth_noniid_generate,
    train_test_split,
)
from .federation import STRATEGIES, FederationResult, StrategyConfig, run_federation
from .metrics import AVERAGING, ConfusionMatrix, average_reports, macro_report
from .seeding import PURPOSES, child_seed
from .stats import DEFAULT_EPS, compute_local_stats

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    clients: int = 5
    source: str = "synth"
    path: str | None = None
    label_column: str = "label"
    features: tuple[str, ...] | None = None
    strict: bool = False
    train_fraction: float = 0.8
    smote: bool | None = None
    smote_k: int = 5
    smote_target: int | None = None
    stats_after_smote: bool = True
    synth: dict = field(default_factory=dict)
    hidden: tuple[int, ...] = (128, 128, 128)
    strategies: tuple[StrategyConfig, ...] = ()
    jobs: int = 1
    verbose: bool = False

    @property
    def smote_enabled(self) -> bool:
        return self.source == "csv" if self.smote is None else self.smote

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategies"] = [s.to_dict() for s in self.strategies]
        d["features"] = list(self.features) if self.features is not None else None
        d["hidden"] = list(self.hidden)
        d["smote_enabled"] = self.smote_enabled
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("smote_enabled", None)
        strategies = tuple(
            StrategyConfig(**{k: v for k, v in s.items() if k not in ("normalization_source", "norm_kind")})
            for s in d.pop("strategies")
        )
        d["features"] = tuple(d["features"]) if d.get("features") is not None else None
        d["hidden"] = tuple(d["hidden"])
        return cls(strategies=strategies, **d)


_FED_KEYS = {"rounds": int, "local_epochs": int, "batch_size": int, "learning_rate": float,
             "reset_optimizer": "bool", "stats_eps": float}
_SYNTH_KEYS = {"samples_per_client": int, "num_features": int, "num_classes": int, "shift_magnitude": float,
               "scale_magnitude": float, "drift_mode": str, "class_separation": float}
_DATA_KEYS = {"source", "path", "label_column", "features", "strict", "train_fraction", "smote", "smote_k",
              "smote_target", "stats_after_smote"}


def _get(sec: configparser.SectionProxy, key: str, kind, where: str):
    try:
        if kind == "bool":
            return sec.getboolean(key)
        return kind(sec[key])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[{where}] {key}: {exc}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Parse an INI run configuration from ``path`` or a string."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    try:
        if text is not None:
            cp.read_string(text)
        else:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}".replace("\n", " ")) from None

    known = {"run", "data", "synth", "model", "federation"}
    for name in cp.sections():
        if name not in known and not name.startswith("strategy."):
            raise ConfigError(f"unknown section [{name}]")

    kw: dict = {}
    if cp.has_section("run"):
        sec = cp["run"]
        for key in sec:
            if key not in ("seed", "clients", "jobs", "verbose"):
                raise ConfigError(f"[run] unknown key {key!r}")
        if "seed" in sec:
            kw["seed"] = _get(sec, "seed", int, "run")
        if "clients" in sec:
            kw["clients"] = _get(sec, "clients", int, "run")
        if "jobs" in sec:
            kw["jobs"] = _get(sec, "jobs", int, "run")
        if "verbose" in sec:
            kw["verbose"] = _get(sec, "verbose", "bool", "run")

    if cp.has_section("data"):
        sec = cp["data"]
        for key in sec:
            if key not in _DATA_KEYS:
                raise ConfigError(f"[data] unknown key {key!r}")
        for key in ("source", "path", "label_column"):
            if key in sec:
                kw[key] = sec[key].strip()
        if "features" in sec:
            kw["features"] = _names(sec["features"]) or None
        for key in ("strict", "smote", "stats_after_smote"):
            if key in sec:
                kw[key] = _get(sec, key, "bool", "data")
        if "train_fraction" in sec:
            kw["train_fraction"] = _get(sec, "train_fraction", float, "data")
        if "smote_k" in sec:
            kw["smote_k"] = _get(sec, "smote_k", int, "data")
        if "smote_target" in sec and sec["smote_target"].strip():
            kw["smote_target"] = _get(sec, "smote_target", int, "data")

    if cp.has_section("synth"):
        synth = {}
        for key in cp["synth"]:
            if key not in _SYNTH_KEYS:
                raise ConfigError(f"[synth] unknown key {key!r}")
            synth[key] = _get(cp["synth"], key, _SYNTH_KEYS[key], "synth")
        kw["synth"] = synth

    if cp.has_section("model") and "hidden" in cp["model"]:
        try:
            kw["hidden"] = tuple(int(h) for h in _names(cp["model"]["hidden"]))
        except ValueError as exc:
            raise ConfigError(f"[model] hidden: {exc}") from None

    base: dict = {}
    names: tuple[str, ...] = STRATEGIES
    if cp.has_section("federation"):
        sec = cp["federation"]
        for key in sec:
            if key == "strategies":
                names = _names(sec[key])
            elif key in _FED_KEYS:
                base[key] = _get(sec, key, _FED_KEYS[key], "federation")
            else:
                raise ConfigError(f"[federation] unknown key {key!r}")
    for name in cp.sections():
        if name.startswith("strategy.") and name[len("strategy."):] not in names:
            names = (*names, name[len("strategy."):])
    kw["strategies"] = tuple(_strategy(cp, n, base) for n in names)
    return _validated(RunConfig(**kw))


def _strategy(cp: configparser.ConfigParser, name: str, base: dict) -> StrategyConfig:
    opts = dict(base)
    sec_name = f"strategy.{name}"
    if cp.has_section(sec_name):
        for key in cp[sec_name]:
            if key not in _FED_KEYS:
                raise ConfigError(f"[{sec_name}] unknown key {key!r}")
            opts[key] = _get(cp[sec_name], key, _FED_KEYS[key], sec_name)
    try:
        return StrategyConfig(name, **opts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _validated(cfg: RunConfig) -> RunConfig:
    if cfg.source not in ("csv", "synth"):
        raise ConfigError("[data] source must be 'csv' or 'synth'")
    if cfg.source == "csv" and not cfg.path:
        raise ConfigError("[data] path is required for csv source")
    if cfg.clients < 1:
        raise ConfigError("[run] clients must be at least 1")
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("[data] train_fraction must lie in (0, 1)")
    if not cfg.strategies:
        raise ConfigError("at least one strategy is required")
    if len({s.strategy for s in cfg.strategies}) != len(cfg.strategies):
        raise ConfigError("a strategy is listed twice")
    if cfg.jobs < 1:
        raise ConfigError("[run] jobs must be at least 1")
    try:
        nn.ModelSpec(1, 2, cfg.hidden)
        if cfg.source == "synth":
            synth_spec(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    # Strategies always run on the master seed so their runs are comparable.
    return replace(cfg, strategies=tuple(replace(s, seed=cfg.seed) for s in cfg.strategies))


def with_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    strategies: Sequence[str] | None = None,
    dataset: str | None = None,
    label_column: str | None = None,
    features: Sequence[str] | None = None,
) -> RunConfig:
    """Apply command-line flags on top of a file configuration."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if dataset is not None:
        cfg = replace(cfg, source="csv", path=dataset)
    if label_column is not None:
        cfg = replace(cfg, label_column=label_column)
    if features is not None:
        cfg = replace(cfg, features=tuple(features))
    if strategies:
        by_name = {s.strategy: s for s in cfg.strategies}
        template = cfg.strategies[0] if cfg.strategies else StrategyConfig("FedAvg")
        picked = []
        for name in strategies:
            if name in by_name:
                picked.append(by_name[name])
            else:
                try:
                    picked.append(replace(template, strategy=name))
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
        cfg = replace(cfg, strategies=tuple(picked))
    return _validated(cfg)


# ---------------------------------------------------------------------------
# Data pipeline


def synth_spec(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(num_clients=cfg.clients, seed=child_seed(cfg.seed, "synth"),
                     train_fraction=cfg.train_fraction, **cfg.synth)


def build_partitions(cfg: RunConfig, smote: bool | None = None) -> list[ClientPartition]:
    """Client train/test data for a run; ``smote=False`` returns pre-upsampling training data."""
    use_smote = cfg.smote_enabled if smote is None else smote
    if cfg.source == "synth":
        raw = synth_noniid_generate(synth_spec(cfg))
        pairs = [(p.train, p.test) for p in raw]
    else:
        ds = load_csv(cfg.path, cfg.label_column, cfg.features, strict=cfg.strict)
        parts = stratified_partition(ds, cfg.clients, child_seed(cfg.seed, "partition"))
        pairs = [train_test_split(p, cfg.train_fraction, child_seed(cfg.seed, "split", i + 1)) for i, p in enumerate(parts)]
    sizes = [tr.num_samples + te.num_samples for tr, te in pairs]
    total = float(sum(sizes))
    out = []
    for i, (train, test) in enumerate(pairs):
        stats_data = None
        if use_smote:
            up = smote_upsample(train, cfg.smote_target, cfg.smote_k, child_seed(cfg.seed, "smote", i + 1))
            if not cfg.stats_after_smote:
                stats_data = train
            train = up
        out.append(ClientPartition(i + 1, train, test, sizes[i] / total, stats_data))
    return out


# ---------------------------------------------------------------------------
# Run directory


def _run_one(args) -> FederationResult:
    parts, spec, strategy = args
    return run_federation(parts, spec, strategy)


def resolved_defaults(cfg: RunConfig) -> dict:
    probe = nn.ModelSpec(1, 2)
    return {
        "smote_k": cfg.smote_k,
        "smote_target": "majority class count" if cfg.smote_target is None else cfg.smote_target,
        "stats_after_smote": cfg.stats_after_smote,
        "bn_momentum": probe.bn_momentum,
        "bn_eps": probe.bn_eps,
        "bn_running_var": "unbiased batch variance",
        "ln_eps": probe.ln_eps,
        "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "stats_eps": DEFAULT_EPS,
        "variance_convention": "population",
        "averaging": AVERAGING,
        "cross_client_averaging": "unweighted mean of per-client macro metrics",
        "init": "glorot_uniform",
        "test_accuracy": "fraction of correctly classified test samples",
        "seed_purposes": dict(PURPOSES),
    }


def run_experiment(cfg: RunConfig, out_dir: str | Path) -> dict[str, FederationResult]:
    """Train every configured strategy on identical partitions and write the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = build_partitions(cfg)
    first = parts[0].train
    for p in parts:
        if p.train.num_features != first.num_features or p.train.class_names != first.class_names:
            raise DataError("clients disagree on feature or class schema")
    spec = nn.ModelSpec(first.num_features, first.num_classes, cfg.hidden)

    jobs = [(parts, spec, s) for s in cfg.strategies]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    by_name = {r.strategy: r for r in results}
    write_run(out, cfg, parts, spec, results)
    return by_name


def write_run(out: Path, cfg: RunConfig, parts: Sequence[ClientPartition], spec: nn.ModelSpec,
              results: Sequence[FederationResult]) -> None:
    for sub in ("reports", "confusion", "checkpoints", "stats"):
        (out / sub).mkdir(exist_ok=True)

    records.write_records(out / "history.jsonl", (rec.to_record() for r in results for rec in r.history))

    records.write_records(out / "stats" / "local.jsonl",
                          (compute_local_stats(p.stats_source, p.client_id).to_record() for p in parts))

    rows = []
    for r in results:
        client_reports = [macro_report(cm) for cm in r.best_confusions]
        avg = average_reports(client_reports)
        pooled = r.best_confusions[0]
        for cm in r.best_confusions[1:]:
            pooled = pooled + cm
        pooled.write_csv(out / "confusion" / f"{r.strategy}.csv")
        for p, cm in zip(parts, r.best_confusions):
            cm.write_csv(out / "confusion" / f"{r.strategy}_client{p.client_id}.csv")
        report = {
            "version": records.FORMAT_VERSION,
            "kind": "strategy_report",
            "strategy": r.strategy,
            "best_round": r.best_round,
            "best_mean_test_accuracy": r.best_accuracy,
            "averaging": AVERAGING,
            "cross_client": avg,
            "clients": [rep.to_record(verbose=cfg.verbose, client_id=p.client_id)
                        for p, rep in zip(parts, client_reports)],
        }
        if cfg.verbose:
            report["cross_client_micro"] = {
                k: float(np.mean([rep.micro[k] for rep in client_reports])) for k in ("acc", "tpr", "fpr", "f1")
            }
        if r.strategy == "FedBN":
            report["reported_model"] = r.metadata["reported_model"]
        records.write_json(out / "reports" / f"{r.strategy}.json", report)
        if r.global_stats is not None:
            records.write_records(out / "stats" / "global.jsonl", [r.global_stats.to_record()])

        _write_models(out / "checkpoints" / f"{r.strategy}_final.jsonl", parts, r.final_models, r.strategy)
        _write_models(out / "checkpoints" / f"{r.strategy}_best.jsonl", parts, r.best_models, r.strategy,
                      round=r.best_round)
        rows.append([r.strategy, r.best_round, r.best_accuracy, avg["acc"], avg["tpr"], avg["fpr"], avg["f1"]])

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "best_round", "best_mean_test_accuracy", "ACC", "TPR", "FPR", "F1"])
        for row in rows:
            w.writerow([row[0], row[1], *(records.format_number(v) for v in row[2:])])

    metadata = {
        "version": records.FORMAT_VERSION,
        "kind": "run_metadata",
        "config": cfg.to_dict(),
        "defaults": resolved_defaults(cfg),
        "model": spec.to_dict(),
        "clients": [
            {"client_id": p.client_id, "train_rows": p.train.num_samples, "test_rows": p.test.num_samples,
             "weight": p.weight, "dropped_rows": p.train.meta.get("dropped_rows", 0)}
            for p in parts
        ],
        "feature_names": list(parts[0].train.feature_names),
        "class_names": list(parts[0].train.class_names),
        "strategies": {r.strategy: r.metadata for r in results},
    }
    records.write_json(out / "metadata.json", metadata)


def _write_models(path: Path, parts, models, strategy: str, **extra) -> None:
    records.write_records(path, (
        nn.to_record(m, strategy=strategy, client_id=p.client_id, **extra) for p, m in zip(parts, models)
    ))


def format_summary(summary_csv: str | Path) -> str:
    """Plain-text ACC/TPR/FPR/F1 table (percent) from a run's summary.csv."""
    with open(summary_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    lines = [f"{'Strategy':<10} {'ACC':>8} {'TPR':>8} {'FPR':>8} {'F1':>8}  best round"]
    for r in rows:
        vals = [100 * float(r[k]) for k in ("ACC", "TPR", "FPR", "F1")]
        lines.append(f"{r['strategy']:<10} " + " ".join(f"{v:7.2f}%" for v in vals) + f"  {r['best_round']}")
    return "\n".join(lines)


def load_run_config(run_dir: str | Path) -> RunConfig:
    meta = records.read_json(Path(run_dir) / "metadata.json")
    return RunConfig.from_dict(meta["config"])


def confusion_for(run_dir: str | Path, strategy: str) -> ConfusionMatrix:
    return ConfusionMatrix.read_csv(Path(run_dir) / "confusion" / f"{strategy}.csv")
