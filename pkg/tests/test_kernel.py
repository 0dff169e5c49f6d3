import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syncswitch.kernel import (
    BatchSampler,
    DivergenceError,
    Hyperparams,
    LRSchedule,
    Model,
    MomentumState,
    ParameterVector,
    full_batch_gd,
    loss_and_grad,
    lr_at,
    make_dataset,
    per_sample_grads,
    sgd_momentum_step,
    test_accuracy,
)


def test_dataset_is_deterministic_and_balanced():
    a = make_dataset(1, 1000, 200, 16, 4)
    b = make_dataset(1, 1000, 200, 16, 4)
    assert np.array_equal(a.X_train, b.X_train) and np.array_equal(a.y_test, b.y_test)
    assert a.X_train.shape == (1000, 16) and a.split == (1000, 200)
    assert np.bincount(a.y_train).tolist() == [250] * 4
    assert np.bincount(a.y_test).tolist() == [50] * 4
    assert not np.array_equal(make_dataset(2, 1000, 200, 16, 4).X_train, a.X_train)


def test_dataset_frozen_values():
    ds = make_dataset(3, 10, 6, 2, 3)
    assert ds.y_train.tolist() == [1, 1, 0, 2, 0, 2, 0, 0, 1, 2]
    np.testing.assert_allclose(ds.X_train[0], [-0.07722684, 0.05611818], atol=1e-8)


@pytest.mark.parametrize("args", [(1, 3, 10, 2, 4), (1, 10, 3, 2, 4), (1, 0, 10, 2, 2), (1, 10, 10, 0, 2)])
def test_dataset_rejects_empty_classes(args):
    with pytest.raises(ValueError):
        make_dataset(*args)


def test_full_batch_gd_oracle():
    # reference accuracy the simulated runs are judged against
    ds = make_dataset(1, 1000, 200, 16, 4)
    model = Model(16, 4, hidden=32)
    params, losses = full_batch_gd(model, ds, 2000, 0.5)
    assert test_accuracy(model, params, ds) == pytest.approx(0.87)
    assert test_accuracy(model, params, ds) >= 0.80
    assert losses[-1] < losses[0]
    lin = Model(16, 4, linear=True)
    params, _ = full_batch_gd(lin, ds, 2000, 0.5)
    assert test_accuracy(lin, params, ds) == pytest.approx(0.88)


def test_sampler_covers_each_epoch_once():
    s = BatchSampler(10, seed=4)
    first = np.concatenate([s.next_indices(3) for _ in range(3)] + [s.next_indices(1)])
    assert sorted(first.tolist()) == list(range(10))
    assert s.epoch == 1 and s.samples_drawn == 10
    wrap = s.next_indices(15)
    assert len(wrap) == 15 and s.epoch == 2


def test_model_shapes_and_init():
    m = Model(2, 3, hidden=4)
    assert m.shapes == [(2, 4), (4,), (4, 3), (3,)]
    assert m.n_params == 27
    p = m.init_params(0)
    W1, b1, W2, b2 = m.unpack(p.values)
    assert p.version == 0
    assert not b1.any() and not b2.any() and W1.shape == (2, 4)
    assert np.array_equal(p.values, m.init_params(0).values)


def test_predict_ties_go_to_lowest_class():
    m = Model(2, 3, linear=True)
    assert m.predict(np.zeros(m.n_params), np.ones((4, 2))).tolist() == [0, 0, 0, 0]


def test_momentum_step_closed_form():
    p = ParameterVector(np.array([1.0, 2.0]), 3)
    s = MomentumState(np.array([0.5, -1.0]))
    new_p, new_s = sgd_momentum_step(p, s, np.array([0.1, 0.2]), 0.1, 0.9)
    np.testing.assert_allclose(new_s.velocity, [0.55, -0.7])
    np.testing.assert_allclose(new_p.values, [0.945, 2.07])
    assert new_p.version == 4
    assert p.values.tolist() == [1.0, 2.0]  # inputs untouched


def test_momentum_step_rejects_bad_input():
    p = ParameterVector(np.zeros(2))
    s = MomentumState.zeros_like(p)
    with pytest.raises(ValueError):
        sgd_momentum_step(p, s, np.zeros(2), 0.0, 0.9)
    with pytest.raises(ValueError):
        sgd_momentum_step(p, s, np.zeros(3), 0.1, 0.9)
    with pytest.raises(DivergenceError):
        sgd_momentum_step(p, s, np.array([np.nan, 0.0]), 0.1, 0.9)


@settings(max_examples=40, deadline=None)
@given(
    mu=st.floats(0.0, 0.99),
    lr=st.floats(1e-4, 1.0),
    g=st.lists(st.floats(-10, 10), min_size=3, max_size=3),
)
def test_two_momentum_steps_unroll(mu, lr, g):
    g = np.array(g)
    p = ParameterVector(np.zeros(3))
    s = MomentumState.zeros_like(p)
    p1, s1 = sgd_momentum_step(p, s, g, lr, mu)
    p2, _ = sgd_momentum_step(p1, s1, g, lr, mu)
    np.testing.assert_allclose(p2.values, -lr * (2 + mu) * g, atol=1e-12)


def test_weight_decay_adds_penalty_and_gradient():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((20, 3)), rng.integers(0, 2, 20)
    m = Model(3, 2, hidden=4)
    w = m.init_params(1).values
    l0, g0 = loss_and_grad(m, w, X, y)
    l1, g1 = loss_and_grad(m, w, X, y, weight_decay=0.1)
    assert l1 == pytest.approx(l0 + 0.05 * w @ w)
    np.testing.assert_allclose(g1, g0 + 0.1 * w)


def test_per_sample_grads_average_to_batch_grad():
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((16, 5)), rng.integers(0, 3, 16)
    for linear in (False, True):
        m = Model(5, 3, hidden=6, linear=linear)
        w = m.init_params(2).values
        per = per_sample_grads(m, w, X, y)
        assert per.shape == (16, m.n_params)
        np.testing.assert_allclose(per.mean(axis=0), loss_and_grad(m, w, X, y)[1], atol=1e-12)


def test_loss_raises_on_non_finite_parameters():
    m = Model(2, 2, linear=True)
    with pytest.raises(DivergenceError):
        loss_and_grad(m, np.full(m.n_params, np.inf), np.ones((2, 2)), np.array([0, 1]))


def test_lr_schedule_factors_do_not_compound():
    sched = LRSchedule(0.4, (100, 200), (0.1, 0.01))
    assert [lr_at(sched, s) for s in (0, 99, 100, 199, 200, 10**6)] == pytest.approx(
        [0.4, 0.4, 0.04, 0.04, 0.004, 0.004]
    )
    assert sched.with_base(1.0).base_lr == 1.0
    with pytest.raises(ValueError):
        lr_at(sched, -1)


@pytest.mark.parametrize(
    "kwargs",
    [dict(base_lr=0), dict(base_lr=1, boundaries=(1,)), dict(base_lr=1, boundaries=(2, 1), factors=(1, 1)),
     dict(base_lr=1, boundaries=(1,), factors=(0,))],
)
def test_lr_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        LRSchedule(**kwargs)


@pytest.mark.parametrize(
    "kwargs", [dict(batch_size=0), dict(learning_rate=-1), dict(momentum=1.0), dict(weight_decay=-1),
               dict(total_workload=0)]
)
def test_hyperparams_validation(kwargs):
    with pytest.raises(ValueError):
        Hyperparams(**kwargs)


def test_hyperparams_schedule():
    hp = Hyperparams(learning_rate=0.2, lr_boundaries=[10], lr_factors=[0.5])
    assert hp.lr_boundaries == (10,)
    assert lr_at(hp.lr_schedule, 10) == pytest.approx(0.1)
