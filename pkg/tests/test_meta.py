import json
import math

import numpy as np
import pytest

from pinchwsr.errors import InvalidParameterError, ShapeError
from pinchwsr.harness import sample_scenario
from pinchwsr.meta import (
    HIDDEN,
    MetaConfig,
    MetaNetParams,
    SubTask,
    an_forward,
    bn_forward,
    gml_baseline,
    gml_jo,
    load_checkpoint,
    mean_loss,
    meta_gradient,
    run_subtask,
    save_checkpoint,
    solve_with_params,
)
from pinchwsr.solvers import initial_state
from pinchwsr.system_model import (
    SystemConfig,
    compute_channel,
    compute_wsr,
    normalize_power,
    pack_complex,
    total_power,
    unpack_complex,
)
from pinchwsr.transforms import (
    LinearizationPoint,
    PenaltyConfig,
    auxiliaries_for,
    grad_penalized_p,
    penalized_wsr,
    penalized_wsr_and_grads,
    position_objective_and_grad,
)


def _np_mlp(layers, x):
    """Reference forward pass written directly with numpy."""
    elu = lambda v: np.where(v > 0, v, np.expm1(np.minimum(v, 0)))
    W1, b1, W2, b2, W3, b3 = layers
    h1 = elu(W1 @ x + b1)
    h2 = elu(W2 @ h1 + b2)
    return np.tanh(W3 @ h2 + b3)


@pytest.fixture(scope="module")
def desk():
    cfg = SystemConfig.build(2, 2)
    sc = sample_scenario(cfg, 11)
    return cfg, sc, initial_state(cfg, sc)


def _small(hidden=8, seed=0, K=2, M=2):
    return MetaNetParams.init(K, M, seed=seed, hidden=hidden)


# -- networks ---------------------------------------------------------------------


def test_layer_shapes():
    p = MetaNetParams.init(2, 3, seed=1)
    assert [a.shape for a in p.bn] == [(HIDDEN, 12), (HIDDEN,), (HIDDEN, HIDDEN), (HIDDEN,), (12, HIDDEN), (12,)]
    assert [a.shape for a in p.an] == [(HIDDEN, 2), (HIDDEN,), (HIDDEN, HIDDEN), (HIDDEN,), (2, HIDDEN), (2,)]


def test_init_is_uniform_fan_in_and_seeded():
    a, b = MetaNetParams.init(2, 2, seed=5), MetaNetParams.init(2, 2, seed=5)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert np.max(np.abs(a.bn[0])) <= 1 / math.sqrt(8)
    assert np.max(np.abs(a.bn[2])) <= 1 / math.sqrt(HIDDEN)


def test_zero_params_give_zero_output():
    z = MetaNetParams.zeros(2, 2)
    np.testing.assert_array_equal(bn_forward(z, np.ones(8)), np.zeros(8))
    np.testing.assert_array_equal(an_forward(z, np.ones(2)), np.zeros(2))


def test_output_range(rng):
    p = MetaNetParams.init(2, 2, seed=3)
    big = p.with_flat(p.flat() * 50)
    for _ in range(20):
        out = bn_forward(big, rng.standard_normal(8) * 1e3)
        assert np.all(np.abs(out) <= 1)
        assert np.all(np.abs(an_forward(big, rng.standard_normal(2) * 1e3)) <= 1)


def test_forward_matches_reference(rng):
    p = MetaNetParams.init(2, 2, seed=4)
    x = rng.standard_normal(8)
    np.testing.assert_allclose(bn_forward(p, x), _np_mlp(p.bn, x), atol=1e-12)
    y = rng.standard_normal(2)
    np.testing.assert_allclose(an_forward(p, y), _np_mlp(p.an, y), atol=1e-12)


def test_forward_shape_errors():
    p = _small()
    with pytest.raises(ShapeError):
        bn_forward(p, np.ones(7))
    with pytest.raises(ShapeError):
        an_forward(p, np.ones(3))
    with pytest.raises(ShapeError):
        MetaNetParams(2, 2, p.bn[:4], p.an)


def test_flat_round_trip():
    p = _small()
    q = p.with_flat(p.flat() + 1.0)
    np.testing.assert_array_equal(q.flat(), p.flat() + 1.0)
    with pytest.raises(ShapeError):
        p.with_flat(np.zeros(3))


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip_is_exact(tmp_path, desk):
    cfg, sc, init = desk
    res = gml_jo(cfg, [sc], init, MetaConfig(n_epochs=2, n_inner=2), params=_small())
    path = save_checkpoint(tmp_path / "ck.json", res.params, {"note": "x", "seed": 7})
    back, extra = load_checkpoint(path)
    assert extra == {"note": "x", "seed": 7}
    for a, b in zip(res.params.bn + res.params.an, back.bn + back.an):
        np.testing.assert_array_equal(a, b)
    assert back.bn_adam.step == res.params.bn_adam.step == 2
    for a, b in zip(res.params.bn_adam.m + res.params.an_adam.v, back.bn_adam.m + back.an_adam.v):
        np.testing.assert_array_equal(a, b)
    assert back.to_dict() == res.params.to_dict()


def test_checkpoint_version_checked(tmp_path):
    path = save_checkpoint(tmp_path / "ck.json", _small())
    data = json.loads(path.read_text())
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(InvalidParameterError):
        load_checkpoint(path)


# -- config ----------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(n_epochs=0), dict(n_inner=0), dict(lr_p=0.0), dict(lambda_d=-1.0), dict(input_norm="bogus")])
def test_meta_config_validation(kw):
    with pytest.raises(InvalidParameterError):
        MetaConfig(**kw)


def test_default_steps(desk):
    cfg, _, _ = desk
    lp, ld = MetaConfig().steps(cfg)
    assert lp == pytest.approx(0.01 * math.sqrt(cfg.total_power / 4))
    assert ld == 0.05


# -- sub-tasks ------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["gml-jo", "gml"])
def test_zero_networks_fixed_point(kind, desk):
    cfg, sc, init = desk
    scaled = init.copy()
    scaled.p = scaled.p * 0.3
    res = run_subtask(cfg, SubTask(sc, scaled), MetaNetParams.zeros(2, 2, hidden=4), MetaConfig(), kind=kind)
    np.testing.assert_allclose(res.state.p, normalize_power(scaled.p, cfg.total_power), rtol=1e-12)
    np.testing.assert_array_equal(res.state.d, init.d)
    w = compute_wsr(compute_channel(cfg, sc, init.d), init.p, cfg)
    assert res.loss == pytest.approx(-w, rel=1e-12)


def test_single_step_manual_trace(desk):
    cfg, sc, init = desk
    params = _small(hidden=16, seed=2)
    meta = MetaConfig(n_inner=1)
    lp, ld = meta.steps(cfg)
    res = run_subtask(cfg, SubTask(sc, init), params, meta)

    h0 = compute_channel(cfg, sc, init.d)
    aux = auxiliaries_for(h0, init.p, cfg.noise_power)
    lin = LinearizationPoint.at(h0, init.p)
    g = grad_penalized_p(h0, init.p, lin, aux, cfg, PenaltyConfig(mu=meta.pen.mu))
    dp = _np_mlp(params.bn, g / np.linalg.norm(g))
    p1 = normalize_power(init.p + lp * unpack_complex(dp, 2, 2), cfg.total_power)
    _, gd = position_objective_and_grad(cfg, sc, init.d, p1, aux)
    d1 = np.clip(init.d + ld * _np_mlp(params.an, gd / np.linalg.norm(gd)), cfg.x_min, cfg.x_max)

    np.testing.assert_allclose(res.state.p, p1, rtol=1e-10)
    np.testing.assert_allclose(res.state.d, d1, rtol=1e-12)
    assert res.wsr == pytest.approx(compute_wsr(compute_channel(cfg, sc, d1), p1, cfg), rel=1e-10)


def test_single_step_manual_trace_raw(desk):
    cfg, sc, init = desk
    params = _small(hidden=16, seed=3)
    meta = MetaConfig(n_inner=1)
    lp, ld = meta.steps(cfg)
    res = run_subtask(cfg, SubTask(sc, init), params, meta, kind="gml")
    _, gp, _ = penalized_wsr_and_grads(cfg, sc, init.d, init.p, meta.pen.mu)
    g = pack_complex(gp)
    p1 = normalize_power(init.p + lp * unpack_complex(_np_mlp(params.bn, g / np.linalg.norm(g)), 2, 2), cfg.total_power)
    _, _, gd = penalized_wsr_and_grads(cfg, sc, init.d, p1, meta.pen.mu)
    d1 = np.clip(init.d + ld * _np_mlp(params.an, gd / np.linalg.norm(gd)), cfg.x_min, cfg.x_max)
    np.testing.assert_allclose(res.state.p, p1, rtol=1e-10)
    np.testing.assert_allclose(res.state.d, d1, rtol=1e-12)


def test_subtask_feasible_by_construction(desk):
    cfg, sc, init = desk
    big = _small(seed=9)
    big = big.with_flat(big.flat() * 20)
    res = run_subtask(cfg, SubTask(sc, init), big, MetaConfig(lambda_d=50.0))
    assert total_power(res.state.p) == pytest.approx(cfg.total_power, rel=1e-9)
    assert np.all(res.state.d >= cfg.x_min) and np.all(res.state.d <= cfg.x_max)


def test_subtask_rejects_mismatched_networks(desk):
    cfg, sc, init = desk
    with pytest.raises(ShapeError):
        run_subtask(cfg, SubTask(sc, init), _small(K=1, M=2), MetaConfig())
    with pytest.raises(InvalidParameterError):
        run_subtask(cfg, SubTask(sc, init), _small(), MetaConfig(), kind="other")


def test_raw_objective_with_zero_penalty_is_wsr(desk):
    cfg, sc, init = desk
    cfg0 = cfg.replace(sinr_min=np.zeros(2))
    for mu in (0.0, 100.0):
        assert penalized_wsr(cfg0, sc, init.d, init.p, mu) == pytest.approx(compute_wsr(compute_channel(cfg0, sc, init.d), init.p, cfg0), rel=1e-12)


# -- meta-gradient -----------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["gml-jo", "gml"])
def test_meta_gradient_finite_difference(kind, desk):
    cfg, sc, init = desk
    params = _small(hidden=16, seed=1)
    meta = MetaConfig(n_epochs=1, n_inner=2)
    tasks = [SubTask(sc, init)]
    _, gbn, gan, _ = meta_gradient(cfg, tasks, params, meta, kind=kind)
    g = np.concatenate([a.ravel() for a in gbn + gan])
    rng = np.random.default_rng(0)
    idx = rng.choice(g.size, 10, replace=False)
    x0 = params.flat()
    for i in idx:
        step = 1e-6
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        num = (mean_loss(cfg, tasks, params.with_flat(xp), meta, kind) - mean_loss(cfg, tasks, params.with_flat(xm), meta, kind)) / (2 * step)
        assert abs(g[i] - num) <= 1e-3 * max(abs(num), 1e-3 * np.max(np.abs(g))), (i, g[i], num)


# -- outer loops --------------------------------------------------------------------------


def test_single_epoch_zero_nets_equals_subtask(desk):
    cfg, sc, init = desk
    z = MetaNetParams.zeros(2, 2, hidden=4)
    res = gml_jo(cfg, [sc], init, MetaConfig(n_epochs=1), params=z)
    sub = run_subtask(cfg, SubTask(sc, init), z, MetaConfig())
    np.testing.assert_allclose(res.p_opt, sub.state.p)
    np.testing.assert_array_equal(res.d_opt, sub.state.d)
    assert res.losses[0] == pytest.approx(sub.loss)


def test_gml_zero_nets_returns_init(desk):
    cfg, sc, init = desk
    # one epoch: the Adam update after it makes the weights non-zero
    res = gml_baseline(cfg, [sc], init, MetaConfig(n_epochs=1), params=MetaNetParams.zeros(2, 2, hidden=4))
    np.testing.assert_allclose(res.p_opt, init.p, rtol=1e-12)
    np.testing.assert_array_equal(res.d_opt, init.d)


@pytest.mark.parametrize("fn", [gml_jo, gml_baseline])
def test_loop_invariants_and_determinism(fn, desk):
    cfg, sc, init = desk
    meta = MetaConfig(n_epochs=8, n_inner=3, seed=4)
    a = fn(cfg, [sc, sample_scenario(cfg, 12)], init, meta.replace(n_tasks=2), params=_small(hidden=32, seed=4))
    b = fn(cfg, [sc, sample_scenario(cfg, 12)], init, meta.replace(n_tasks=2), params=_small(hidden=32, seed=4))
    assert np.all(np.diff(a.trajectory.best_curve) >= 0)
    assert all(r.feasible() for r in a.trajectory.records)
    assert len(a.trajectory.records) == 8
    np.testing.assert_array_equal(a.trajectory.wsr, b.trajectory.wsr)
    np.testing.assert_array_equal(a.p_opt, b.p_opt)
    assert total_power(a.p_opt) == pytest.approx(cfg.total_power, rel=1e-9)


def test_meta_training_reduces_loss_single_user():
    cfg = SystemConfig.build(1, 1)
    sc = sample_scenario(cfg, 11)
    res = gml_jo(cfg, [sc], initial_state(cfg, sc), MetaConfig(n_epochs=30, seed=0))
    assert np.mean(res.losses[-5:]) < res.losses[0]


def test_best_never_below_start(desk):
    cfg, sc, init = desk
    res = gml_jo(cfg, [sc], init, MetaConfig(n_epochs=20, seed=0))
    assert res.best_wsr >= compute_wsr(compute_channel(cfg, sc, init.d), init.p, cfg)


def test_inference_uses_trained_networks(desk):
    cfg, sc, init = desk
    res = gml_jo(cfg, [sc], init, MetaConfig(n_epochs=3, n_inner=2), params=_small())
    st = solve_with_params(cfg, sample_scenario(cfg, 99), init, res.params, MetaConfig(n_inner=2))
    assert st.p.shape == (2, 2) and st.d.shape == (2,)
    assert total_power(st.p) == pytest.approx(cfg.total_power, rel=1e-9)


def test_requires_a_task(desk):
    cfg, _, init = desk
    with pytest.raises(InvalidParameterError):
        gml_jo(cfg, [], init, MetaConfig(n_epochs=1))
