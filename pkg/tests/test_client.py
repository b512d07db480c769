import numpy as np
import pytest

from fedasync import data, models
from fedasync.client import ClientConfig, local_train
from fedasync.core import (
    DivergenceError,
    Hyperparams,
    ParamVector,
    STREAM_CLIENT,
    derive_rng,
)
from fedasync.models import GradientSample, ModelSpec


def make_client(hp, seed_stream=0, spec=None, dataset=None):
    if dataset is None:
        dataset = data.generate_blobs(3, 4, 30, 1.0, seed=2)
    if spec is None:
        spec = ModelSpec("softmax-classifier", input_dim=4, num_classes=3)
    shard = data.whole_dataset_shard(dataset, owner="c000")
    return ClientConfig(
        client_id="c000",
        dataset=dataset,
        shard=shard,
        spec=spec,
        hp=hp,
        rng=derive_rng(hp.seed, STREAM_CLIENT, seed_stream),
    )


def test_zero_iterations_returns_dispatched_model_unchanged():
    hp = Hyperparams(h_min=0, h_max=3, seed=1)
    cfg = make_client(hp)
    w_t = models.init_params(cfg.spec, 1)
    update = local_train(cfg, w_t, t=4, h=0)
    assert update.tau == 4
    assert np.array_equal(update.w_new.values, w_t.values)
    assert update.local_iterations_done == 0


def test_single_step_without_anchor_is_plain_sgd():
    hp = Hyperparams(eta=0.1, theta=0.0, momentum=0.0, h_min=1, h_max=1,
                     batch_size=8, seed=3)
    cfg = make_client(hp)
    w_t = ParamVector(0.3 * derive_rng(0, 9).standard_normal(models.param_dim(cfg.spec)))

    # reproduce the batch with an identically derived generator
    oracle_rng = derive_rng(hp.seed, STREAM_CLIENT, 0)
    batch = data.sample_batch(cfg.shard, cfg.dataset, hp.batch_size, oracle_rng)
    expected = w_t.values - hp.eta * models.grad(cfg.spec, w_t, batch).values

    update = local_train(cfg, w_t, t=0, h=1)
    assert np.array_equal(update.w_new.values, expected)


def test_three_anchored_steps_match_straight_line_oracle():
    hp = Hyperparams(eta=0.05, theta=0.1, momentum=0.0, h_min=1, h_max=3,
                     batch_size=4, seed=5)
    cfg = make_client(hp)
    w_t = ParamVector(0.2 * derive_rng(1, 8).standard_normal(models.param_dim(cfg.spec)))

    # independent unrolled loop with its own generator and explicit arithmetic
    rng = derive_rng(hp.seed, STREAM_CLIENT, 0)
    w = w_t.values.copy()
    for _ in range(3):
        batch = data.sample_batch(cfg.shard, cfg.dataset, hp.batch_size, rng)
        g = models.grad(cfg.spec, ParamVector(w), batch).values
        w = w - hp.eta * (g + hp.theta * (w - w_t.values))

    update = local_train(cfg, w_t, t=2, h=3)
    assert np.max(np.abs(update.w_new.values - w)) <= 1e-12


def test_tau_equals_dispatch_epoch_and_reproducible():
    hp = Hyperparams(seed=7, h_min=1, h_max=3)
    w_t = models.init_params(ModelSpec("softmax-classifier", input_dim=4, num_classes=3))
    a = local_train(make_client(hp), w_t, t=11, h=3)
    b = local_train(make_client(hp), w_t, t=11, h=3)
    assert a.tau == b.tau == 11
    assert a.w_new.values.tobytes() == b.w_new.values.tobytes()


def test_momentum_changes_the_trajectory_but_stays_finite():
    base = Hyperparams(eta=0.05, theta=0.1, h_min=1, h_max=3, seed=7)
    with_m = Hyperparams(eta=0.05, theta=0.1, h_min=1, h_max=3, seed=7, momentum=0.9)
    w_t = models.init_params(ModelSpec("softmax-classifier", input_dim=4, num_classes=3))
    plain = local_train(make_client(base), w_t, t=0, h=3)
    heavy = local_train(make_client(with_m), w_t, t=0, h=3)
    assert not np.array_equal(plain.w_new.values, heavy.w_new.values)


def test_frozen_coordinates_never_move():
    spec = ModelSpec("two-layer", input_dim=3, num_classes=3, hidden_dim=4)
    dim = models.param_dim(spec)
    head = 4 * 3 + 3
    mask = tuple(i < dim - head for i in range(dim))
    frozen_spec = ModelSpec("two-layer", input_dim=3, num_classes=3, hidden_dim=4,
                            frozen_mask=mask)
    hp = Hyperparams(eta=0.1, theta=0.2, h_min=1, h_max=5, seed=9)
    ds = data.generate_blobs(3, 3, 20, 1.0, seed=4)
    cfg = make_client(hp, spec=frozen_spec, dataset=ds)
    w_t = models.init_params(frozen_spec, 9)
    update = local_train(cfg, w_t, t=0, h=5)
    frozen = np.asarray(mask)
    assert update.w_new.values[frozen].tobytes() == w_t.values[frozen].tobytes()
    assert not np.array_equal(update.w_new.values[~frozen], w_t.values[~frozen])


def test_contracts_geometrically_toward_anchor_when_data_gradient_vanishes():
    # zero features, zero labels, and zero bias make the data gradient vanish
    ds = data.Dataset(np.zeros((10, 2)), np.zeros(10), num_classes=None)
    spec = ModelSpec("l2-linear-regression", input_dim=2, l2_coeff=0.0)
    hp = Hyperparams(eta=0.5, theta=0.4, h_min=1, h_max=8, batch_size=2, seed=1)
    cfg = make_client(hp, spec=spec, dataset=ds)
    anchor = ParamVector([1.0, -2.0, 0.0])
    start = ParamVector([3.0, 4.0, 0.0])
    for h in (1, 3, 8):
        update = local_train(cfg, anchor, t=0, h=h, start=start)
        expected = (1.0 - hp.eta * hp.theta) ** h * np.linalg.norm(start.values - anchor.values)
        got = np.linalg.norm(update.w_new.values - anchor.values)
        assert got == pytest.approx(expected, rel=1e-12)


def test_iteration_count_bounds_enforced():
    hp = Hyperparams(h_min=2, h_max=4, seed=0)
    cfg = make_client(hp)
    w_t = models.init_params(cfg.spec)
    for bad in (1, 5):
        with pytest.raises(ValueError):
            local_train(cfg, w_t, t=0, h=bad)


def test_divergence_aborts_with_diagnostic():
    spec = ModelSpec("softmax-classifier", input_dim=4, num_classes=3, l2_coeff=1.0)
    hp = Hyperparams(eta=1e200, h_min=1, h_max=8, batch_size=4, seed=0)
    cfg = make_client(hp, spec=spec)
    w_t = models.init_params(spec)
    with pytest.raises(DivergenceError, match="c000"):
        local_train(cfg, w_t, t=0, h=8)


def test_gradient_log_records_one_sample_per_iteration():
    hp = Hyperparams(eta=0.05, theta=0.1, h_min=1, h_max=3, seed=2)
    cfg = make_client(hp)
    w_t = models.init_params(cfg.spec)
    log: list[GradientSample] = []
    local_train(cfg, w_t, t=0, h=3, grad_log=log)
    assert len(log) == 3
    # logging must not perturb training
    again = local_train(make_client(hp), w_t, t=0, h=3)
    assert np.array_equal(
        again.w_new.values,
        local_train(make_client(hp), w_t, t=0, h=3, grad_log=[]).w_new.values,
    )


def test_empty_shard_rejected():
    ds = data.generate_blobs(2, 2, 5, 1.0, seed=0)
    with pytest.raises(ValueError):
        ClientConfig(
            client_id="c",
            dataset=ds,
            shard=data.Shard("c", np.array([], dtype=int)),
            spec=ModelSpec("softmax-classifier", input_dim=2, num_classes=2),
            hp=Hyperparams(),
            rng=np.random.default_rng(0),
        )
