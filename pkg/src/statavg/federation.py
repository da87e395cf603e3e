"""In-process federated training: StatAvg, FedAvg, FedLN and FedBN."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn, records
from .data import ClientPartition, LabeledDataset
from .metrics import ConfusionMatrix, confusion
from .seeding import child_seed, rng_for
from .stats import (
    DEFAULT_EPS, GlobalStats, LocalStats, aggregate_stats, as_global, compute_local_stats, normalize,
)

log = logging.getLogger(__name__)

STRATEGIES = ("StatAvg", "FedAvg", "FedLN", "FedBN")
_NORM_KIND = {"StatAvg": "none", "FedAvg": "none", "FedLN": "layer_norm", "FedBN": "batch_norm"}

FEDBN_REPORTING = "mean of per-client composite models (shared layers + client BN layers)"


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str
    rounds: int = 50
    local_epochs: int = 2
    batch_size: int = 512
    learning_rate: float = 0.002
    seed: int = 0
    reset_optimizer: bool = False
    stats_eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be at least 1")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and nonnegative")

    @property
    def normalization_source(self) -> str:
        return "global_stats" if self.strategy == "StatAvg" else "local_stats"

    @property
    def norm_kind(self) -> str:
        return _NORM_KIND[self.strategy]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "reset_optimizer": self.reset_optimizer,
            "stats_eps": self.stats_eps,
            "normalization_source": self.normalization_source,
            "norm_kind": self.norm_kind,
        }


@dataclass
class ClientState:
    partition: ClientPartition
    local_stats: LocalStats
    normalized_train: LabeledDataset | None = None
    normalized_test: LabeledDataset | None = None
    model: nn.ModelParams | None = None
    opt_state: nn.AdamState | None = None

    @property
    def client_id(self) -> int:
        return self.partition.client_id


@dataclass(frozen=True)
class LocalUpdate:
    params: nn.ModelParams
    opt_state: nn.AdamState
    mean_loss: float
    steps: int


@dataclass(frozen=True)
class RoundRecord:
    round: int
    per_client_test_accuracy: tuple[float, ...]
    mean_test_accuracy: float
    mean_train_loss: float
    strategy: str

    def to_record(self) -> dict:
        return {
            "version": records.FORMAT_VERSION,
            "strategy": self.strategy,
            "round": self.round,
            "mean_test_accuracy": self.mean_test_accuracy,
            "per_client_accuracy": list(self.per_client_test_accuracy),
            "mean_train_loss": self.mean_train_loss,
        }


@dataclass
class FederationResult:
    strategy: str
    history: list[RoundRecord]
    final_models: list[nn.ModelParams]
    best_round: int
    best_models: list[nn.ModelParams]
    best_confusions: list[ConfusionMatrix]
    global_stats: GlobalStats | None
    metadata: dict = field(default_factory=dict)

    @property
    def best_accuracy(self) -> float:
        return self.history[self.best_round - 1].mean_test_accuracy


# ---------------------------------------------------------------------------
# Normalization phase


def make_clients(partitions: Sequence[ClientPartition]) -> list[ClientState]:
    ordered = sorted(partitions, key=lambda p: p.client_id)
    return [ClientState(p, compute_local_stats(p.stats_source, p.client_id)) for p in ordered]


def _over_wire(stats: LocalStats) -> LocalStats:
    # Clients and server share a process; the exchange still goes through
    # the record format so the protocol is exercised end to end.
    return LocalStats.from_record(records.loads(records.dumps(stats.to_record())))


def statavg_phase0(clients: Sequence[ClientState], eps: float = DEFAULT_EPS) -> GlobalStats:
    """Share local statistics, pool them, and normalize every client with the result.

    Runs once before the first round. Each client's train and test features
    are z-scored with the pooled statistics (in place on ``clients``).
    """
    received = [_over_wire(c.local_stats) for c in clients]
    g = aggregate_stats(received)
    g = GlobalStats.from_record(records.loads(records.dumps(g.to_record())))
    for c in clients:
        c.normalized_train = normalize(c.partition.train, g, eps)
        c.normalized_test = normalize(c.partition.test, g, eps)
    return g


def local_normalization(clients: Sequence[ClientState], eps: float = DEFAULT_EPS) -> None:
    """Baseline normalization: every client z-scores with its own statistics."""
    for c in clients:
        ref = as_global(c.local_stats)
        c.normalized_train = normalize(c.partition.train, ref, eps)
        c.normalized_test = normalize(c.partition.test, ref, eps)


# ---------------------------------------------------------------------------
# Local training and aggregation


def _is_bn(group: nn.ParamGroup) -> bool:
    return group.kind == "batch_norm"


def load_global(global_model: nn.ModelParams, local_model: nn.ModelParams | None, keep_bn: bool) -> nn.ModelParams:
    """Model a client trains from: the global model, optionally keeping its own BN groups."""
    if not keep_bn or local_model is None:
        return global_model
    groups = tuple(l if _is_bn(l) else g for g, l in zip(global_model.groups, local_model.groups))
    return nn.ModelParams(global_model.spec, groups)


def local_update(
    client: ClientState, global_model: nn.ModelParams, config: StrategyConfig, round_index: int
) -> LocalUpdate:
    """Run ``local_epochs`` epochs of shuffled mini-batch Adam from the broadcast model."""
    params = load_global(global_model, client.model, keep_bn=config.strategy == "FedBN")
    state = client.opt_state
    if state is None or config.reset_optimizer:
        state = nn.AdamState.create(params, config.learning_rate)
    data = client.normalized_train
    rng = rng_for(config.seed, "shuffle", client.client_id, round_index)
    drop = params.spec.norm_kind == "batch_norm"
    losses = []
    for _ in range(config.local_epochs):
        for idx in nn.minibatches(data.num_samples, config.batch_size, rng, drop_singleton=drop):
            params, state, loss = nn.train_step(params, state, data.features[idx], data.labels[idx])
            losses.append(loss)
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return LocalUpdate(params, state, mean_loss, len(losses))


def _check_weights(models: Sequence[nn.ModelParams], weights: Sequence[float]) -> np.ndarray:
    if not models:
        raise ValueError("no models to aggregate")
    if len(models) != len(weights):
        raise ValueError("one weight per model required")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("aggregation weights must be nonnegative and sum to 1")
    ref = [(g.kind, {n: a.shape for n, a in g.arrays.items()}) for g in models[0].groups]
    for m in models[1:]:
        if [(g.kind, {n: a.shape for n, a in g.arrays.items()}) for g in m.groups] != ref:
            raise ValueError("models have mismatched parameter shapes")
    return w


def _weighted(arrays: Sequence[np.ndarray], w: np.ndarray) -> np.ndarray:
    # Anchored on the first model: identical inputs (or a one-hot weight
    # vector) reproduce a model bit-for-bit.
    base = arrays[0]
    acc = np.zeros_like(base)
    for wi, a in zip(w[1:], arrays[1:]):
        acc += wi * (a - base)
    return base + acc


def fedavg_aggregate(models: Sequence[nn.ModelParams], weights: Sequence[float]) -> nn.ModelParams:
    """Weighted elementwise average of every parameter group."""
    w = _check_weights(models, weights)
    groups = []
    for gi, g in enumerate(models[0].groups):
        arrays = {n: _weighted([m.groups[gi].arrays[n] for m in models], w) for n in g.names()}
        groups.append(nn.ParamGroup(g.kind, arrays))
    return nn.ModelParams(models[0].spec, tuple(groups))


def fedbn_aggregate(models: Sequence[nn.ModelParams], weights: Sequence[float]) -> list[nn.ModelParams]:
    """Average the non-BN groups; each client keeps its own BN groups untouched.

    Returns one composite model per input model, in input order.
    """
    w = _check_weights(models, weights)
    shared = []
    for gi, g in enumerate(models[0].groups):
        if _is_bn(g):
            shared.append(None)
            continue
        arrays = {n: _weighted([m.groups[gi].arrays[n] for m in models], w) for n in g.names()}
        shared.append(nn.ParamGroup(g.kind, arrays))
    return [
        nn.ModelParams(m.spec, tuple(own if s is None else s for s, own in zip(shared, m.groups)))
        for m in models
    ]


# ---------------------------------------------------------------------------
# Round loop


RoundObserver = Callable[[int, list[nn.ModelParams], list[nn.ModelParams]], None]


def _evaluate(clients: Sequence[ClientState], models: Sequence[nn.ModelParams]):
    accs, cms = [], []
    for c, m in zip(clients, models):
        test = c.normalized_test
        pred = nn.predict(m, test.features)
        accs.append(float(np.mean(pred == test.labels)) if test.num_samples else 0.0)
        cms.append(confusion(test.labels, pred, test.num_classes, test.class_names))
    return accs, cms


def run_federation(
    partitions: Sequence[ClientPartition],
    model_spec: nn.ModelSpec,
    config: StrategyConfig,
    on_round: RoundObserver | None = None,
) -> FederationResult:
    """Normalize, then run ``config.rounds`` rounds of broadcast/train/aggregate/evaluate.

    ``on_round(t, local_models, aggregated_models)`` is called after every
    aggregation with the per-client models before and after it.
    """
    spec = replace(model_spec, norm_kind=config.norm_kind)
    clients = make_clients(partitions)
    g = None
    if config.strategy == "StatAvg":
        g = statavg_phase0(clients, config.stats_eps)
    else:
        local_normalization(clients, config.stats_eps)
    for c in clients:
        if c.normalized_train.num_features != spec.input_dim:
            raise ValueError(f"client {c.client_id} has {c.normalized_train.num_features} features, "
                             f"model expects {spec.input_dim}")

    counts = np.array([c.normalized_train.num_samples for c in clients], dtype=np.float64)
    weights = counts / counts.sum()
    global_model = nn.init_params(spec, child_seed(config.seed, "init"))
    fedbn = config.strategy == "FedBN"
    for c in clients:
        c.model = global_model

    history: list[RoundRecord] = []
    best = (-1.0, 0, None, None)
    for t in range(1, config.rounds + 1):
        updates = [local_update(c, global_model, config, t) for c in clients]
        local_models = [u.params for u in updates]
        for c, u in zip(clients, updates):
            c.opt_state = u.opt_state
        if fedbn:
            aggregated = fedbn_aggregate(local_models, weights)
            global_model = aggregated[0]
        else:
            global_model = fedavg_aggregate(local_models, weights)
            aggregated = [global_model] * len(clients)
        for c, m in zip(clients, aggregated):
            c.model = m
        if on_round is not None:
            on_round(t, local_models, aggregated)

        accs, cms = _evaluate(clients, aggregated)
        rec = RoundRecord(
            t, tuple(accs), float(np.mean(accs)), float(np.mean([u.mean_loss for u in updates])), config.strategy,
        )
        history.append(rec)
        log.info("%s round %d: mean test accuracy %.4f, train loss %.4f",
                 config.strategy, t, rec.mean_test_accuracy, rec.mean_train_loss)
        if rec.mean_test_accuracy > best[0]:
            best = (rec.mean_test_accuracy, t, list(aggregated), cms)

    probe = nn.AdamState.create(global_model, config.learning_rate)
    metadata = {
        "strategy": config.to_dict(),
        "model": spec.to_dict(),
        "normalization_source": config.normalization_source,
        "aggregation_weights": weights.tolist(),
        "adam": {k: v for k, v in probe.hyperparameters().items() if k != "lr"},
        "optimizer_state": "reset each round" if config.reset_optimizer else "persists across rounds",
        "init": "glorot_uniform",
    }
    if fedbn:
        metadata["reported_model"] = FEDBN_REPORTING
    if g is not None:
        metadata["global_stats"] = g.to_record()
    return FederationResult(
        config.strategy,
        history,
        [c.model for c in clients],
        best[1],
        best[2],
        best[3],
        g,
        metadata,
    )
