import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinchwsr.errors import DegenerateGeometryError, InvalidParameterError, NormalizationError, ShapeError
from pinchwsr.system_model import (
    SPEED_OF_LIGHT,
    SystemConfig,
    check_feasibility,
    compute_channel,
    compute_sinr,
    compute_wsr,
    distances,
    guided_wavelength,
    normalize_power,
    pack_complex,
    project_positions,
    total_power,
    unpack_complex,
)

from conftest import random_instance, single_point_scenario, unit_config


# -- guided wavelength ------------------------------------------------------


def test_guided_wavelength_identity_index():
    assert guided_wavelength(1.0, 1.0) == 1.0


def test_guided_wavelength_exact_division():
    assert guided_wavelength(1.4, 1.4) == pytest.approx(1.0, abs=1e-15)


def test_guided_wavelength_at_28ghz():
    lam = SPEED_OF_LIGHT / 28e9
    assert lam == pytest.approx(0.0107, abs=1e-4)
    assert guided_wavelength(lam, 1.4) == pytest.approx(0.00765, abs=1e-5)


@pytest.mark.parametrize("lam,n", [(0.0, 1.0), (-1.0, 1.2), (1.0, 0.9)])
def test_guided_wavelength_rejects_bad_input(lam, n):
    with pytest.raises(InvalidParameterError):
        guided_wavelength(lam, n)


# -- config -------------------------------------------------------------------


def test_default_config_units():
    cfg = SystemConfig.build()
    assert cfg.total_power == pytest.approx(1e3)
    assert cfg.noise_power == pytest.approx(1e-7)
    assert cfg.attenuation == pytest.approx(cfg.carrier_wavelength**2 / (16 * math.pi**2))
    assert cfg.box == (0.0, 20.0)


@pytest.mark.parametrize("kw", [dict(num_waveguides=0), dict(weights=[1.5]), dict(sinr_min=[-1.0]), dict(x_min=5.0, x_max=5.0)])
def test_config_invariants(kw):
    with pytest.raises(InvalidParameterError):
        unit_config(**kw)


# -- channel -----------------------------------------------------------------


def test_channel_half_wavelength_phase():
    cfg = unit_config(eta=1.0, lam=2.0, lam_g=2.0)
    h = compute_channel(cfg, single_point_scenario(), np.array([0.0]))
    assert h[0, 0] == pytest.approx(-1.0 + 0.0j, abs=1e-12)


def test_channel_full_wavelength_phase():
    cfg = unit_config(eta=4.0, lam=1.0, lam_g=1.0)
    h = compute_channel(cfg, single_point_scenario(), np.array([0.0]))
    assert h[0, 0] == pytest.approx(2.0 + 0.0j, abs=1e-12)


def _independent_distances(cfg, sc, d):
    free = np.empty((cfg.K, cfg.M))
    for k in range(cfg.K):
        for m in range(cfg.M):
            ant = (d[k], sc.waveguide_y[k], cfg.waveguide_height)
            free[k, m] = math.dist(ant, tuple(sc.user_positions[m]))
    return free, np.abs(d - sc.feed_x)


def test_channel_magnitude_and_phase_law(rng):
    for _ in range(20):
        cfg, sc, d, _ = random_instance(rng, K=int(rng.integers(1, 4)), M=int(rng.integers(1, 4)))
        h = compute_channel(cfg, sc, d)
        free, guide = _independent_distances(cfg, sc, d)
        np.testing.assert_allclose(np.abs(h) * free, math.sqrt(cfg.attenuation), rtol=1e-12)
        phase = -2 * np.pi * (free / cfg.carrier_wavelength + guide[:, None] / cfg.guided_wavelength)
        diff = np.angle(h * np.exp(-1j * phase))
        assert np.max(np.abs(diff)) < 1e-9


def test_channel_zero_distance_raises():
    cfg = unit_config(waveguide_height=0.0)
    with pytest.raises(DegenerateGeometryError):
        compute_channel(cfg, single_point_scenario(height=0.0), np.array([0.0]))


def test_channel_shape_mismatch():
    cfg = unit_config()
    with pytest.raises(ShapeError):
        compute_channel(cfg, single_point_scenario(), np.array([0.0, 1.0]))


def test_distances_match_independent(rng):
    cfg, sc, d, _ = random_instance(rng, 3, 2)
    free, guide = distances(cfg, sc, d)
    f2, g2 = _independent_distances(cfg, sc, d)
    np.testing.assert_allclose(free, f2, rtol=1e-14)
    np.testing.assert_allclose(guide, g2, rtol=1e-14)


# -- SINR and WSR --------------------------------------------------------------


def test_sinr_single_user():
    G, I, s = compute_sinr(np.array([[1.0 + 0j]]), np.array([[1.0 + 0j]]), 0.5)
    assert (G[0], I[0], s[0]) == (1.0, 0.0, 2.0)


def test_sinr_zero_forcing_direction():
    h = np.array([[1.0, 0.3j], [1.0j, 2.0]])
    p2 = np.array([1.0, -1.0 / np.conj(h[1, 0]) * np.conj(h[0, 0])])  # h_1^H p_2 = 0
    p = np.column_stack([np.array([1.0, 0.5]), p2])
    assert abs(np.conj(h[:, 0]) @ p2) < 1e-14
    _, I, _ = compute_sinr(h, p, 1.0)
    assert I[0] == pytest.approx(0.0, abs=1e-14)


def _termwise_sinr(h, p, noise):
    K, M = h.shape
    out = []
    for m in range(M):
        terms = []
        for n in range(M):
            acc = 0j
            for k in range(K):
                acc += np.conj(h[k, m]) * p[k, n]
            terms.append(abs(acc) ** 2)
        G = terms[m]
        I = sum(terms) - G
        out.append((G, I, G / (I + noise)))
    return np.array(out)


def test_sinr_matches_termwise(rng):
    for _ in range(20):
        h = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        p = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        G, I, s = compute_sinr(h, p, 0.3)
        ref = _termwise_sinr(h, p, 0.3)
        np.testing.assert_allclose(np.column_stack([G, I, s]), ref, rtol=1e-12)


def test_sinr_single_user_reduces_to_snr(rng):
    h = rng.standard_normal((3, 1)) + 1j * rng.standard_normal((3, 1))
    p = rng.standard_normal((3, 1)) + 1j * rng.standard_normal((3, 1))
    G, I, s = compute_sinr(h, p, 0.7)
    assert I[0] == 0.0 and s[0] == G[0] / 0.7


def test_sinr_shape_error():
    with pytest.raises(ShapeError):
        compute_sinr(np.ones((2, 2)), np.ones((2, 3)), 1.0)


def test_wsr_two_users_unit_sinr():
    cfg = unit_config(K=2, M=2, sinr_min=np.zeros(2), weights=np.ones(2), noise_power=1.0)
    h = np.eye(2, dtype=complex)
    p = np.eye(2, dtype=complex)
    assert compute_wsr(h, p, cfg) == pytest.approx(2.0, abs=1e-15)


def test_wsr_zero_weights(rng):
    cfg, sc, d, p = random_instance(rng)
    cfg = cfg.replace(weights=np.zeros(2))
    assert compute_wsr(compute_channel(cfg, sc, d), p, cfg) == 0.0


def test_wsr_composes_sinr(rng):
    cfg, sc, d, p = random_instance(rng, weights=[0.3, 0.8])
    h = compute_channel(cfg, sc, d)
    _, _, s = compute_sinr(h, p, cfg.noise_power)
    assert compute_wsr(h, p, cfg) == pytest.approx(0.3 * math.log2(1 + s[0]) + 0.8 * math.log2(1 + s[1]), rel=1e-12)


def test_wsr_invariant_under_column_phase(rng):
    cfg, sc, d, p = random_instance(rng, 3, 3)
    h = compute_channel(cfg, sc, d)
    rot = p * np.exp(1j * rng.uniform(0, 2 * np.pi, 3))[None, :]
    assert compute_wsr(h, rot, cfg) == pytest.approx(compute_wsr(h, p, cfg), rel=1e-12)


# -- constraints --------------------------------------------------------------


def test_normalize_halves():
    p = np.full((2, 2), 1.0 + 0j)  # power 4
    np.testing.assert_allclose(normalize_power(p, 1.0), p / 2)


def test_normalize_fixed_point(rng):
    p = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    p = p / math.sqrt(total_power(p)) * math.sqrt(5.0)
    np.testing.assert_allclose(normalize_power(p, 5.0), p, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e6))
def test_normalize_power_equality_and_idempotence(seed, ptot):
    r = np.random.default_rng(seed)
    p = r.standard_normal((3, 2)) + 1j * r.standard_normal((3, 2))
    q = normalize_power(p, ptot)
    assert abs(total_power(q) - ptot) <= 1e-9 * ptot
    np.testing.assert_allclose(normalize_power(q, ptot), q, rtol=1e-9)


def test_normalize_zero_raises():
    with pytest.raises(NormalizationError):
        normalize_power(np.zeros((2, 2), complex), 1.0)


@pytest.mark.parametrize("x,expected", [(-3.0, 0.0), (5.0, 5.0), (12.0, 10.0)])
def test_projection_clamps(x, expected):
    assert project_positions(np.array([x]), (0.0, 10.0))[0] == expected


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5))
def test_projection_idempotent(xs):
    d = project_positions(np.array(xs), (0.0, 10.0))
    assert np.all((d >= 0.0) & (d <= 10.0))
    np.testing.assert_array_equal(project_positions(d, (0.0, 10.0)), d)


def test_feasibility_all_true_at_zero_threshold(rng):
    cfg, sc, d, p = random_instance(rng, sinr_min=[0.0, 0.0])
    p = normalize_power(p, cfg.total_power)
    d = project_positions(d + 100.0, cfg.box)
    rep = check_feasibility(compute_channel(cfg, sc, d), p, d, cfg)
    assert rep.power_ok and rep.position_ok and rep.qos_ok and rep.all_ok


def test_feasibility_power_doubled(rng):
    cfg, sc, d, p = random_instance(rng)
    p = 2 * normalize_power(p, cfg.total_power)
    rep = check_feasibility(compute_channel(cfg, sc, d), p, d, cfg)
    assert not rep.power_ok
    assert rep.violations["power_slack"] == pytest.approx(-3 * cfg.total_power, rel=1e-12)


def test_feasibility_slacks_recomputed(rng):
    cfg, sc, d, p = random_instance(rng, 2, 3)
    h = compute_channel(cfg, sc, d)
    rep = check_feasibility(h, p, d, cfg)
    s = _termwise_sinr(h, p, cfg.noise_power)[:, 2]
    np.testing.assert_allclose(rep.violations["qos_slack"], s - cfg.sinr_min, rtol=1e-12)
    assert rep.violations["power_slack"] == pytest.approx(cfg.total_power - np.sum(np.abs(p) ** 2), rel=1e-12)
    np.testing.assert_allclose(rep.violations["position_slack"], np.minimum(d - cfg.x_min, cfg.x_max - d))


def test_pack_round_trip_column_major(rng):
    p = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    v = pack_complex(p)
    assert v.shape == (12,)
    np.testing.assert_array_equal(v[:2], p[:, 0].real)
    np.testing.assert_array_equal(unpack_complex(v, 2, 3), p)
