import math

import numpy as np
import pytest

from statavg import nn
from statavg.data import ClientPartition, SynthSpec, synth_noniid_generate
from statavg.federation import (
    StrategyConfig, fedavg_aggregate, fedbn_aggregate, local_normalization, local_update, make_clients,
    run_federation, statavg_phase0,
)
from statavg.stats import compute_local_stats

from conftest import make_dataset


def small_parts(n=3, samples=200, shift=3.0, scale=1.0, seed=0, features=4, classes=3):
    return synth_noniid_generate(SynthSpec(
        num_clients=n, samples_per_client=samples, num_features=features, num_classes=classes,
        shift_magnitude=shift, scale_magnitude=scale, seed=seed,
    ))


def scalar_model(value):
    spec = nn.ModelSpec(1, 2, (), "none")
    return nn.ModelParams(spec, (nn.ParamGroup("dense", {"weights": np.full((1, 2), value),
                                                         "bias": np.full(2, value)}),))


# --- config -----------------------------------------------------------------

def test_strategy_config_coupling():
    for s in ("FedAvg", "FedLN", "FedBN"):
        assert StrategyConfig(s).normalization_source == "local_stats"
    assert StrategyConfig("StatAvg").normalization_source == "global_stats"
    assert StrategyConfig("FedLN").norm_kind == "layer_norm"
    assert StrategyConfig("FedBN").norm_kind == "batch_norm"
    assert StrategyConfig("StatAvg").norm_kind == "none"


def test_strategy_config_defaults_follow_reference_settings():
    c = StrategyConfig("StatAvg")
    assert (c.rounds, c.local_epochs, c.batch_size, c.learning_rate) == (50, 2, 512, 0.002)


@pytest.mark.parametrize("kw", [{"rounds": 0}, {"local_epochs": 0}, {"batch_size": 0},
                                {"learning_rate": -1.0}, {"learning_rate": float("nan")}])
def test_strategy_config_invalid(kw):
    with pytest.raises(ValueError):
        StrategyConfig("FedAvg", **kw)
    with pytest.raises(ValueError):
        StrategyConfig("FedProx")


# --- phase 0 ----------------------------------------------------------------

def test_phase0_single_client_equals_local():
    parts = small_parts(n=1)
    a = make_clients(parts)
    b = make_clients(parts)
    g = statavg_phase0(a)
    local_normalization(b)
    assert g.total_count == parts[0].train.num_samples
    np.testing.assert_array_equal(a[0].normalized_train.features, b[0].normalized_train.features)
    np.testing.assert_array_equal(a[0].normalized_test.features, b[0].normalized_test.features)


def test_phase0_iid_global_close_to_local():
    parts = synth_noniid_generate(SynthSpec(num_clients=4, samples_per_client=1000, num_features=5,
                                            num_classes=3, shift_magnitude=0.0, scale_magnitude=0.0,
                                            drift_mode="none", seed=2))
    clients = make_clients(parts)
    g = statavg_phase0(clients)
    for c in clients:
        bound = 5 * np.sqrt(c.local_stats.variance) / math.sqrt(c.local_stats.count)
        assert np.all(np.abs(g.mean - c.local_stats.mean) < bound)


def test_phase0_pooled_normalized_is_standard():
    clients = make_clients(small_parts(n=4, shift=5.0, scale=1.5))
    statavg_phase0(clients)
    pooled = np.vstack([c.normalized_train.features for c in clients])
    np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(pooled.var(axis=0), 1.0, atol=1e-9)


def test_phase0_normalizes_test_with_global():
    clients = make_clients(small_parts(n=2))
    g = statavg_phase0(clients)
    c = clients[1]
    expected = (c.partition.test.features - g.mean) / np.sqrt(g.variance)
    np.testing.assert_allclose(c.normalized_test.features, expected, rtol=1e-12, atol=1e-12)


def test_baseline_normalizes_test_with_local_stats():
    clients = make_clients(small_parts(n=2))
    local_normalization(clients)
    for c in clients:
        st = c.local_stats
        expected = (c.partition.test.features - st.mean) / np.sqrt(st.variance)
        np.testing.assert_allclose(c.normalized_test.features, expected, rtol=1e-12, atol=1e-12)


def test_stats_source_pre_smote():
    parts = small_parts(n=1)
    p = parts[0]
    half = p.train.subset(np.arange(p.train.num_samples // 2))
    q = ClientPartition(p.client_id, p.train, p.test, p.weight, stats_data=half)
    (c,) = make_clients([q])
    np.testing.assert_array_equal(c.local_stats.mean, compute_local_stats(half).mean)


# --- local update -------------------------------------------------------------

@pytest.mark.parametrize("norm,strategy,n,b,e,steps", [
    ("none", "FedAvg", 100, 32, 2, 8),
    ("none", "FedAvg", 96, 32, 3, 9),
    ("batch_norm", "FedBN", 97, 32, 2, 6),   # (4 - 1 dropped) * 2
    ("batch_norm", "FedBN", 98, 32, 1, 4),
])
def test_local_update_step_count(norm, strategy, n, b, e, steps, rng):
    ds = make_dataset(rng.normal(size=(n, 3)), rng.integers(0, 2, n))
    (c,) = make_clients([ClientPartition(1, ds, ds, 1.0)])
    local_normalization([c])
    cfg = StrategyConfig(strategy, rounds=1, local_epochs=e, batch_size=b)
    model = nn.init_params(nn.ModelSpec(3, 2, (4,), norm), 0)
    up = local_update(c, model, cfg, 1)
    assert up.steps == steps
    assert up.opt_state.t == steps


def test_local_update_zero_lr_is_identity():
    (c,) = make_clients(small_parts(n=1))
    local_normalization([c])
    model = nn.init_params(nn.ModelSpec(4, 3, (8,), "layer_norm"), 0)
    up = local_update(c, model, StrategyConfig("FedLN", learning_rate=0.0, batch_size=16), 1)
    assert nn.equal(up.params, model)


def test_local_update_deterministic():
    def go():
        (c,) = make_clients(small_parts(n=1))
        local_normalization([c])
        model = nn.init_params(nn.ModelSpec(4, 3, (8,), "batch_norm"), 0)
        return local_update(c, model, StrategyConfig("FedBN", batch_size=16), 3).params

    assert nn.equal(go(), go())


def test_fedbn_local_update_keeps_own_bn():
    (c,) = make_clients(small_parts(n=1))
    local_normalization([c])
    spec = nn.ModelSpec(4, 3, (8,), "batch_norm")
    glob = nn.init_params(spec, 0)
    own = nn.init_params(spec, 1).map_trainable(lambda gi, n, a: a + 1.0)
    c.model = own
    up = local_update(c, glob, StrategyConfig("FedBN", learning_rate=0.0, batch_size=512), 1)
    np.testing.assert_array_equal(up.params.groups[1].arrays["gain"], own.groups[1].arrays["gain"])
    np.testing.assert_array_equal(up.params.groups[0].arrays["weights"], glob.groups[0].arrays["weights"])


# --- aggregation ---------------------------------------------------------------

def test_fedavg_identical_models_exact():
    m = nn.init_params(nn.ModelSpec(5, 3, (7,), "layer_norm"), 4)
    out = fedavg_aggregate([m, m, m], [0.2, 0.3, 0.5])
    assert nn.equal(out, m)


def test_fedavg_one_hot_weights():
    a = nn.init_params(nn.ModelSpec(5, 3, (7,), "none"), 1)
    b = nn.init_params(nn.ModelSpec(5, 3, (7,), "none"), 2)
    assert nn.equal(fedavg_aggregate([a, b], [1.0, 0.0]), a)


def test_fedavg_scalar_arithmetic():
    out = fedavg_aggregate([scalar_model(1.0), scalar_model(3.0)], [0.25, 0.75])
    np.testing.assert_array_equal(out.groups[0].arrays["weights"], 2.5)


def test_fedavg_errors():
    a = nn.init_params(nn.ModelSpec(5, 3, (7,), "none"), 1)
    b = nn.init_params(nn.ModelSpec(5, 3, (6,), "none"), 1)
    with pytest.raises(ValueError, match="shape"):
        fedavg_aggregate([a, b], [0.5, 0.5])
    with pytest.raises(ValueError, match="sum to 1"):
        fedavg_aggregate([a, a], [0.5, 0.6])
    with pytest.raises(ValueError):
        fedavg_aggregate([], [])


def test_fedavg_equal_weights_is_unweighted_mean():
    models = [nn.init_params(nn.ModelSpec(5, 3, (7,), "none"), s) for s in range(4)]
    out = fedavg_aggregate(models, [0.25] * 4)
    mean = np.mean([nn.flatten(m) for m in models], axis=0)
    np.testing.assert_allclose(nn.flatten(out), mean, rtol=0, atol=1e-12)


def test_fedavg_client_order_independence(rng):
    models = [nn.init_params(nn.ModelSpec(5, 3, (7,), "layer_norm"), s) for s in range(5)]
    w = rng.dirichlet(np.ones(5))
    perm = rng.permutation(5)
    a = fedavg_aggregate(models, w)
    b = fedavg_aggregate([models[i] for i in perm], w[perm])
    np.testing.assert_allclose(nn.flatten(a), nn.flatten(b), rtol=0, atol=1e-12)


def test_fedbn_excludes_bn_groups():
    spec = nn.ModelSpec(3, 2, (4,), "batch_norm")
    base = nn.init_params(spec, 0)
    models = []
    for k in range(3):
        groups = list(base.groups)
        bn = dict(groups[1].arrays)
        bn["gain"] = bn["gain"] * (k + 2)
        bn["running_mean"] = bn["running_mean"] + k
        groups[1] = nn.ParamGroup("batch_norm", bn)
        models.append(nn.ModelParams(spec, tuple(groups)))
    out = fedbn_aggregate(models, [0.2, 0.3, 0.5])
    for m, o in zip(models, out):
        for n in m.groups[1].names():
            np.testing.assert_array_equal(o.groups[1].arrays[n], m.groups[1].arrays[n])
        assert nn.equal(nn.ModelParams(spec, (o.groups[0], base.groups[1], o.groups[2])),
                        nn.ModelParams(spec, (base.groups[0], base.groups[1], base.groups[2])))


def test_fedbn_without_bn_equals_fedavg():
    models = [nn.init_params(nn.ModelSpec(5, 3, (7,), "none"), s) for s in range(3)]
    w = [0.5, 0.25, 0.25]
    for out in fedbn_aggregate(models, w):
        assert nn.equal(out, fedavg_aggregate(models, w))


def test_fedbn_running_means_stay_distinct():
    parts = small_parts(n=2, shift=4.0)
    seen = []
    cfg = StrategyConfig("FedBN", rounds=1, local_epochs=1, batch_size=32)
    run_federation(parts, nn.ModelSpec(4, 3, (8,)), cfg,
                   on_round=lambda t, local, agg: seen.extend(agg))
    a, b = (m.groups[1].arrays["running_mean"] for m in seen)
    assert not np.array_equal(a, b)


# --- round loop -----------------------------------------------------------------

@pytest.mark.parametrize("strategy", ("StatAvg", "FedAvg", "FedLN", "FedBN"))
def test_history_length_and_ranges(strategy):
    cfg = StrategyConfig(strategy, rounds=3, local_epochs=1, batch_size=64)
    res = run_federation(small_parts(n=3), nn.ModelSpec(4, 3, (8,)), cfg)
    assert [r.round for r in res.history] == [1, 2, 3]
    for r in res.history:
        assert len(r.per_client_test_accuracy) == 3
        assert all(0.0 <= a <= 1.0 for a in r.per_client_test_accuracy)
        assert r.mean_test_accuracy == pytest.approx(np.mean(r.per_client_test_accuracy), abs=1e-15)
        assert r.strategy == strategy
    assert res.best_accuracy == max(r.mean_test_accuracy for r in res.history)
    assert len(res.best_confusions) == 3
    assert res.metadata["normalization_source"] == cfg.normalization_source
    assert res.metadata["model"]["norm_kind"] == cfg.norm_kind
    assert (res.global_stats is not None) == (strategy == "StatAvg")
    if strategy == "FedBN":
        assert "reported_model" in res.metadata


def test_reference_settings_echoed_in_metadata():
    cfg = StrategyConfig("StatAvg", rounds=50, local_epochs=2, batch_size=512, learning_rate=0.002)
    parts = small_parts(n=5, samples=40)
    res = run_federation(parts, nn.ModelSpec(4, 3, (4,)), cfg)
    md = res.metadata["strategy"]
    assert (md["rounds"], md["local_epochs"], md["batch_size"], md["learning_rate"]) == (50, 2, 512, 0.002)
    assert len(res.history) == 50 and len(res.history[0].per_client_test_accuracy) == 5
    assert res.metadata["normalization_source"] == "global_stats"
    assert res.metadata["adam"] == {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


def test_aggregation_weights_from_train_counts():
    parts = small_parts(n=2)
    p0 = parts[0]
    parts[0] = ClientPartition(p0.client_id, p0.train.subset(np.arange(60)), p0.test, p0.weight)
    res = run_federation(parts, nn.ModelSpec(4, 3, (4,)), StrategyConfig("FedAvg", rounds=1))
    n1 = parts[1].train.num_samples
    assert res.metadata["aggregation_weights"] == pytest.approx([60 / (60 + n1), n1 / (60 + n1)], rel=1e-15)


def test_run_federation_deterministic():
    def go():
        cfg = StrategyConfig("FedBN", rounds=2, local_epochs=1, batch_size=32, seed=5)
        return run_federation(small_parts(n=2), nn.ModelSpec(4, 3, (8,)), cfg)

    a, b = go(), go()
    assert [r.to_record() for r in a.history] == [r.to_record() for r in b.history]
    assert all(nn.equal(x, y) for x, y in zip(a.final_models, b.final_models))


def test_partition_order_does_not_matter():
    parts = small_parts(n=3)
    cfg = StrategyConfig("StatAvg", rounds=2, local_epochs=1, batch_size=64)
    a = run_federation(parts, nn.ModelSpec(4, 3, (8,)), cfg)
    b = run_federation(parts[::-1], nn.ModelSpec(4, 3, (8,)), cfg)
    assert [r.to_record() for r in a.history] == [r.to_record() for r in b.history]


def test_input_dim_mismatch():
    with pytest.raises(ValueError, match="features"):
        run_federation(small_parts(n=1), nn.ModelSpec(5, 3, (4,)), StrategyConfig("FedAvg", rounds=1))
