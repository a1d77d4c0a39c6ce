import numpy as np
import pytest

from nfcodebook.channel import Scenario, UserArea, generate_batch
from nfcodebook.codebook import PhaseMatrix, init_phase_matrix
from nfcodebook.grad import loss, loss_gradient
from nfcodebook.meta import (
    MetaConfig, Task, adapt_and_evaluate, build_tasks, inner_adapt, mean_rate, meta_train,
)
from nfcodebook.train import TrainConfig, train_codebook

P_MAX, NOISE = 1.0, 1e-4


@pytest.fixture
def family():
    return [
        Scenario((UserArea.from_degrees(-40, 0, 0.01, 0.035),), 2, name="left"),
        Scenario((UserArea.from_degrees(0, 40, 0.01, 0.035),), 2, name="right"),
    ]


@pytest.fixture
def tasks(geom9, family):
    return build_tasks(geom9, family, 6, 4, 4, np.random.default_rng(0))


@pytest.fixture
def omega(geom9):
    return init_phase_matrix("uniform-random", geom9, np.random.default_rng(42))


def test_build_single_task(geom9, family):
    ts = build_tasks(geom9, family, 1, 1, 1, np.random.default_rng(1))
    assert len(ts) == 1 and len(ts[0].support) == 1 and len(ts[0].query) == 1


def test_build_tasks_deterministic(geom9, family):
    a = build_tasks(geom9, family, 4, 3, 2, np.random.default_rng(5))
    b = build_tasks(geom9, family, 4, 3, 2, np.random.default_rng(5))
    for x, y in zip(a, b):
        assert x.scenario == y.scenario
        np.testing.assert_array_equal(x.support.matrices, y.support.matrices)
        np.testing.assert_array_equal(x.query.matrices, y.query.matrices)


def test_single_scenario_family(geom9, family):
    ts = build_tasks(geom9, family[:1], 5, 2, 2, np.random.default_rng(2))
    assert {t.scenario for t in ts} == {"left"}


def test_support_query_disjoint(tasks):
    for t in tasks:
        for s in t.support.matrices:
            assert not any(np.array_equal(s, q) for q in t.query.matrices)


def test_task_validation(tasks):
    with pytest.raises(ValueError):
        Task(tasks[0].support.subset([]), tasks[0].query)


def test_meta_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(inner_steps=0)
    with pytest.raises(ValueError):
        MetaConfig(outer_mode="second-order")


@pytest.mark.parametrize("steps", [1, 3])
@pytest.mark.parametrize("opt", ["plain-gd", "adam"])
def test_inner_adapt_zero_rate_identity(omega, tasks, steps, opt):
    psi = inner_adapt(omega, tasks[0].support, steps, 0.0, opt, 2, P_MAX, NOISE)
    np.testing.assert_array_equal(psi.theta, omega.theta)


def test_inner_adapt_single_gd_step(omega, tasks):
    psi = inner_adapt(omega, tasks[0].support, 1, 0.02, "plain-gd", 2, P_MAX, NOISE)
    g = loss_gradient(omega, tasks[0].support, 2, P_MAX, NOISE).gradient
    np.testing.assert_array_equal(psi.theta, omega.theta - 0.02 * g)


def test_inner_adapt_descends(omega, tasks):
    s = tasks[1].support
    psi = inner_adapt(omega, s, 3, 0.02, "adam", 2, P_MAX, NOISE)
    assert loss(psi, s, 2, P_MAX, NOISE) <= loss(omega, s, 2, P_MAX, NOISE)


def test_meta_zero_inner_rate_is_query_descent(omega, tasks):
    cfg = MetaConfig(task_batch_size=3, inner_steps=2, inner_rate=0.0, outer_rate=0.3, epochs=1)
    res = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(9))
    chosen = np.random.default_rng(9).choice(len(tasks), size=3, replace=False)
    grad = sum(loss_gradient(omega, tasks[t].query, 2, P_MAX, NOISE).gradient for t in chosen)
    np.testing.assert_allclose(res.omega.theta, omega.theta - 0.1 * grad, atol=1e-13)


def test_meta_zero_outer_rate(omega, tasks):
    cfg = MetaConfig(task_batch_size=2, inner_steps=1, inner_rate=0.05, outer_rate=0.0, epochs=3)
    res = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(1))
    np.testing.assert_array_equal(res.omega.theta, omega.theta)
    assert res.history.shape == (3,) and np.all(np.isfinite(res.history))


def test_meta_first_order_composition(omega, tasks):
    cfg = MetaConfig(task_batch_size=1, inner_steps=1, inner_rate=0.03, outer_rate=0.2, epochs=1,
                     inner_optimizer="plain-gd")
    res = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(4))
    t = tasks[int(np.random.default_rng(4).choice(len(tasks), size=1, replace=False)[0])]
    psi = omega.theta - 0.03 * loss_gradient(omega, t.support, 2, P_MAX, NOISE).gradient
    ev = loss_gradient(psi, t.query, 2, P_MAX, NOISE)
    np.testing.assert_array_equal(res.omega.theta, omega.theta - 0.2 * ev.gradient)
    assert res.history[0] == ev.loss


def test_meta_deterministic(omega, tasks):
    cfg = MetaConfig(task_batch_size=2, inner_steps=2, epochs=4)
    a = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(3))
    b = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(3))
    np.testing.assert_array_equal(a.omega.theta, b.omega.theta)
    np.testing.assert_array_equal(a.history, b.history)


def test_meta_history_recomputable_from_checkpoints(omega, tasks):
    cfg = MetaConfig(task_batch_size=2, inner_steps=2, epochs=3)
    res = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(6), keep_adapted=True)
    for epoch, record in enumerate(res.adapted):
        total = sum(loss(psi, tasks[t].query, 2, P_MAX, NOISE) for t, psi in record)
        assert total == pytest.approx(res.history[epoch], rel=1e-14)


def test_task_adaptation_independent_of_order(omega, tasks):
    cfg = MetaConfig(task_batch_size=3, inner_steps=2, epochs=1)
    res = meta_train(cfg, tasks, omega, 2, P_MAX, NOISE, np.random.default_rng(8), keep_adapted=True)
    for t, psi in reversed(res.adapted[0]):
        alone = inner_adapt(omega, tasks[t].support, 2, cfg.inner_rate, "adam", 2, P_MAX, NOISE)
        np.testing.assert_array_equal(alone.theta, psi.theta)


def test_meta_needs_enough_tasks(omega, tasks):
    with pytest.raises(ValueError):
        meta_train(MetaConfig(task_batch_size=7), tasks, omega, 2, P_MAX, NOISE)


def test_adapt_zero_rate_equals_direct_evaluation(geom9, family, omega):
    rate, psi = adapt_and_evaluate(omega, family[0], 4, 0.0, 8, geom9, 2, P_MAX, NOISE,
                                   np.random.default_rng(11), support_size=5)
    rng = np.random.default_rng(11)
    generate_batch(geom9, family[0], 5, rng)
    held_out = generate_batch(geom9, family[0], 8, rng)
    np.testing.assert_array_equal(psi.theta, omega.theta)
    assert rate == mean_rate(omega, held_out, 2, P_MAX, NOISE)


def test_adapt_pipeline_identity_for_trained_codebook(geom9, family, omega):
    data = generate_batch(geom9, family[1], 32, np.random.default_rng(12))
    dnn = train_codebook(TrainConfig(8, 0.05, 20), data, omega, 2, P_MAX, NOISE, np.random.default_rng(0)).theta
    rate, _ = adapt_and_evaluate(dnn, family[1], 5, 0.0, 16, geom9, 2, P_MAX, NOISE, np.random.default_rng(13))
    rng = np.random.default_rng(13)
    generate_batch(geom9, family[1], 16, rng)
    assert rate == mean_rate(dnn, generate_batch(geom9, family[1], 16, rng), 2, P_MAX, NOISE)


def test_adapt_requires_eval_samples(geom9, family, omega):
    with pytest.raises(ValueError):
        adapt_and_evaluate(omega, family[0], 1, 0.1, 0, geom9, 2, P_MAX, NOISE, np.random.default_rng(0))
