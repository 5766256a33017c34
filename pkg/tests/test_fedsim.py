import dataclasses

import numpy as np
import pytest

from fedseg.datastore import ConfigurationError, make_client
from fedseg.fedsim import (
    AggregationError,
    FedConfig,
    aggregation_weights,
    episode_rng,
    fedavg,
    iterations_per_epoch,
    local_train,
    run_federation,
    train_centralized,
)
from fedseg.protoseg import EncoderConfig, init_params
from fedseg.tensor import ModelParams, Tensor


def scalar_model(v, dtype=np.float32):
    return ModelParams(["w"], [Tensor(np.array([v], dtype=dtype), requires_grad=True)])


def random_models(n, seed=0):
    rng = np.random.default_rng(seed)
    return [ModelParams(["a", "b"], [Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
                                     Tensor(rng.normal(size=(5,)).astype(np.float32))]) for _ in range(n)]


def quick_cfg(**kw):
    base = dict(rounds=1, iteration_cap=4, eval_classes=(1, 2), global_seed=3)
    base.update(kw)
    return FedConfig(**base)


# -- weights -----------------------------------------------------------------------
def test_weights_reference_roster():
    lam = aggregation_weights([20, 20, 15, 15, 25])
    np.testing.assert_allclose(lam, [0.210526, 0.210526, 0.157895, 0.157895, 0.263158], atol=1e-6)
    assert sum(lam) == pytest.approx(1.0, abs=1e-9)


def test_weights_capped_and_single():
    assert aggregation_weights([500, 5000], 1000) == pytest.approx([1 / 3, 2 / 3])
    assert aggregation_weights([7]) == [1.0]
    with pytest.raises(ConfigurationError):
        aggregation_weights([])
    with pytest.raises(ConfigurationError):
        aggregation_weights([3, 0])


# -- fedavg ------------------------------------------------------------------------
def test_fedavg_weighted_mean_of_scalars():
    out = fedavg([scalar_model(0.0), scalar_model(1.0)], [0.25, 0.75])
    assert float(out["w"].data[0]) == 0.75


def test_fedavg_identical_models_exact():
    m = random_models(1)[0]
    out = fedavg([m.copy() for _ in range(5)], aggregation_weights([20, 20, 15, 15, 25]))
    assert out.checksum() == m.checksum()


def test_fedavg_matches_hand_computed_mean():
    models = random_models(3, 1)
    lam = [0.2, 0.3, 0.5]
    out = fedavg(models, lam)
    for i in range(2):
        ref = sum(np.float64(w) * m.tensors[i].data.astype(np.float64) for w, m in zip(lam, models))
        assert np.abs(out.tensors[i].data - ref).max() <= 1e-7 * max(1.0, np.abs(ref).max())


def test_fedavg_linearity():
    models = random_models(4, 2)
    lam = aggregation_weights([3, 9, 1, 4])
    for a in (0.5, -2.0, 3.7):
        scaled = [ModelParams(m.names, [Tensor(t.data * np.float32(a)) for t in m]) for m in models]
        lhs, rhs = fedavg(scaled, lam), fedavg(models, lam)
        for x, y in zip(lhs, rhs):
            np.testing.assert_allclose(x.data, a * y.data, atol=1e-6)


def test_fedavg_structure_mismatch_names_tensor():
    a, b = random_models(2)
    b.tensors[1] = Tensor(np.zeros(6, dtype=np.float32))
    with pytest.raises(AggregationError, match="'b'"):
        fedavg([a, b], [0.5, 0.5])
    with pytest.raises(AggregationError):
        fedavg([a], [0.5, 0.5])


# -- schedule and iterations -----------------------------------------------------
def test_lr_schedule_closed_form():
    cfg = FedConfig()
    assert cfg.lr(0) == 1e-3
    assert cfg.lr(1) == pytest.approx(9.6e-4, abs=1e-12)
    assert abs(cfg.lr(10) - 6.64833e-4) <= 1e-9
    assert cfg.lr(99) == 1e-3 * 0.96 ** 99


def test_iteration_cap_rule():
    assert iterations_per_epoch(500, 1000) == 500
    assert iterations_per_epoch(5000, 1000) == 1000
    assert iterations_per_epoch(5000, None) == 5000


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FedConfig(rounds=0)
    with pytest.raises(ConfigurationError):
        FedConfig(iteration_cap=0)
    with pytest.raises(ConfigurationError):
        FedConfig(batch_size=2)


def test_episode_rng_separates_streams():
    draws = {episode_rng(0, 1, r, 0, i).integers(2**62) for r in range(3) for i in range(3)}
    assert len(draws) == 9
    assert episode_rng(0, 1, 2, 0, 5).random() == episode_rng(0, 1, 2, 0, 5).random()


# -- training ------------------------------------------------------------------------
def test_local_train_is_deterministic_and_capped(tiny_clients):
    c = tiny_clients[0]
    cfg = quick_cfg()
    start = init_params(cfg.proto.encoder, 0)
    a, st = local_train(c, start, 0, cfg)
    b, _ = local_train(c, start, 0, cfg)
    assert a.checksum() == b.checksum() != start.checksum()
    assert st["iterations"] == 4 and st["slice_count"] == c.slice_count
    assert st["lr"] == cfg.lr(0)


def test_identical_clients_identical_local_models(tiny_clients):
    c = tiny_clients[0]
    twin = make_client("twin", [c.support] + c.training + c.validation, c.seed, c.style)
    cfg = quick_cfg()
    start = init_params(cfg.proto.encoder, 0)
    m1, _ = local_train(c, start, 0, cfg)
    m2, _ = local_train(twin, start, 0, cfg)
    assert m1.checksum() == m2.checksum()
    avg = fedavg([m1, m2], [0.5, 0.5])
    assert avg.checksum() == m1.checksum()


def test_single_client_equals_centralized(tiny_clients):
    cfg = quick_cfg(rounds=2)
    fed = run_federation(cfg, tiny_clients[:1])
    central = train_centralized(tiny_clients[0], cfg)
    assert fed.params.checksum() == central.checksum()
    assert len(fed.reports) == 2 and fed.reports[0].weights == [1.0]


def test_run_reports_and_parallel_workers_agree(tiny_clients):
    cfg = quick_cfg(rounds=2)
    serial = run_federation(cfg, tiny_clients)
    parallel = run_federation(dataclasses.replace(cfg, workers=2), tiny_clients)
    assert len(serial.reports) == 2
    assert serial.params.checksum() == parallel.params.checksum()
    for r in serial.reports:
        assert sum(r.weights) == pytest.approx(1.0, abs=1e-9)
        assert [c.client_id for c in r.clients] == ["client1", "client2"]
    assert [r.lr for r in serial.reports] == [cfg.lr(0), cfg.lr(1)]


def test_baseline_mode_reports_zero_dice_terms(tiny_clients):
    run = run_federation(quick_cfg(baseline_mode=True), tiny_clients[:1])
    losses = run.reports[0].clients[0].losses
    assert losses.spatial_dice == 0.0 and losses.edge_dice == 0.0 and losses.total > 0


def test_holdout_is_evaluated_but_never_trained(tiny_clients):
    cfg = quick_cfg()
    with_holdout = run_federation(cfg, tiny_clients[:1], holdout=tiny_clients[1])
    without = run_federation(cfg, tiny_clients[:1])
    assert with_holdout.params.checksum() == without.params.checksum()
    assert with_holdout.reports[0].holdout is not None and with_holdout.initial_holdout is not None


def test_no_clients_is_an_error():
    with pytest.raises(ConfigurationError):
        run_federation(quick_cfg(), [])
