"""Self-checks run by ``pinchwsr check``: transform identities, gradient
checks against finite differences and exhaustive-search dominance."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .solvers import SolveOptions, initial_state, solve_ao_baseline, solve_exhaustive, solve_transformed_ao
from .system_model import SystemConfig, compute_channel, compute_sinr, compute_wsr, pack_complex, unpack_complex
from .transforms import (
    LinearizationPoint,
    PenaltyConfig,
    auxiliaries_for,
    barrier_p_objective_and_grad,
    dual_rate_value,
    grad_penalized_p,
    penalized_p_objective,
    penalized_wsr,
    penalized_wsr_and_grads,
    position_objective,
    position_objective_and_grad,
    quadratic_fraction_value,
    transformed_objective,
    update_auxiliaries,
)
from .harness import sample_scenario


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as e:  # a crashing check is a failed check
        ok, detail = False, f"{type(e).__name__}: {e}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def random_triples(rng, n):
    """Log-uniform (G, I, noise) triples spanning several decades."""
    G = 10 ** rng.uniform(-6, 3, n)
    I = 10 ** rng.uniform(-6, 3, n)
    s = 10 ** rng.uniform(-6, 1, n)
    return G, I, s


def transform_identities(seed=0, n=10_000, tol=1e-12):
    rng = np.random.default_rng(seed)
    G, I, s = random_triples(rng, n)
    sinr = G / (I + s)
    aux = update_auxiliaries(G, I, s)
    e1 = np.max(np.abs(dual_rate_value(aux.gamma, sinr) - np.log2(1 + sinr)) / np.maximum(1.0, np.log2(1 + sinr)))
    e2 = np.max(np.abs(quadratic_fraction_value(aux.y, G, I, s) - sinr / (1 + sinr)))
    return max(e1, e2) < tol, f"max error {max(e1, e2):.2e} over {n} triples"


def wsr_round_trip(seed=0, n=50, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        K, M = rng.integers(1, 4, 2)
        cfg = SystemConfig.build(int(K), int(M), power_dbm=rng.uniform(0, 60))
        sc = sample_scenario(cfg, rng)
        d = rng.uniform(cfg.x_min, cfg.x_max, cfg.K)
        h = compute_channel(cfg, sc, d)
        p = rng.standard_normal((cfg.K, cfg.M)) + 1j * rng.standard_normal((cfg.K, cfg.M))
        aux = auxiliaries_for(h, p, cfg.noise_power)
        worst = max(worst, abs(transformed_objective(h, p, aux, cfg) - compute_wsr(h, p, cfg)))
    return worst < tol, f"max |lifted - WSR| {worst:.2e}"


def _instance(rng, K=2, M=2, power_dbm=30.0):
    cfg = SystemConfig.build(K, M, power_dbm=power_dbm)
    sc = sample_scenario(cfg, rng)
    d = rng.uniform(cfg.x_min + 0.5, cfg.x_max - 0.5, K)
    p = rng.standard_normal((K, M)) + 1j * rng.standard_normal((K, M))
    return cfg, sc, d, p


def gradient_suite(seed=0, n=20, tol=1e-4, tol_d=1e-3):
    """Finite-difference checks of every differentiable objective."""
    rng = np.random.default_rng(seed)
    worst = {"surrogate": 0.0, "position": 0.0, "raw_p": 0.0, "raw_d": 0.0, "barrier": 0.0}
    for _ in range(n):
        cfg, sc, d, p = _instance(rng)
        h = compute_channel(cfg, sc, d)
        K, M = cfg.K, cfg.M
        pen = PenaltyConfig(mu=1e-3)
        aux = auxiliaries_for(h, p, cfg.noise_power)
        lin = LinearizationPoint.at(h, p * (1 + 0.1 * rng.standard_normal(p.shape)))
        x0 = pack_complex(p)
        c = ad.grad_check(lambda x: penalized_p_objective(h, unpack_complex(x, K, M), lin, aux, cfg, pen), x0,
                          step=1e-5 * np.abs(x0).max(), grad=lambda x: grad_penalized_p(h, unpack_complex(x, K, M), lin, aux, cfg, pen))
        worst["surrogate"] = max(worst["surrogate"], c.max_rel_err)
        c = ad.grad_check(lambda x: position_objective(cfg, sc, x, p, aux), d, step=1e-7,
                          grad=lambda x: position_objective_and_grad(cfg, sc, x, p, aux)[1])
        worst["position"] = max(worst["position"], c.max_rel_err)
        c = ad.grad_check(lambda x: penalized_wsr(cfg, sc, d, unpack_complex(x, K, M), 1e-3), x0, step=1e-5 * np.abs(x0).max(),
                          grad=lambda x: pack_complex(penalized_wsr_and_grads(cfg, sc, d, unpack_complex(x, K, M), 1e-3)[1]))
        worst["raw_p"] = max(worst["raw_p"], c.max_rel_err)
        c = ad.grad_check(lambda x: penalized_wsr(cfg, sc, x, p, 1e-3), d, step=1e-7,
                          grad=lambda x: penalized_wsr_and_grads(cfg, sc, x, p, 1e-3)[2])
        worst["raw_d"] = max(worst["raw_d"], c.max_rel_err)
        q = p * math.sqrt(0.5 * cfg.total_power / np.sum(np.abs(p) ** 2))
        xq = pack_complex(q)
        c = ad.grad_check(lambda x: barrier_p_objective_and_grad(h, unpack_complex(x, K, M), lin, aux, cfg, pen)[0], xq,
                          step=1e-5 * np.abs(xq).max(), grad=lambda x: barrier_p_objective_and_grad(h, unpack_complex(x, K, M), lin, aux, cfg, pen)[1])
        worst["barrier"] = max(worst["barrier"], c.max_rel_err)
    ok = all(v < (tol_d if k in ("position", "raw_d") else tol) for k, v in worst.items())
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def exhaustive_dominance(seed=0, n=3):
    """On K = M = 1 the grid optimum is never beaten by the iterative solvers."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n):
        cfg = SystemConfig.build(1, 1)
        sc = sample_scenario(cfg, rng)
        ex = solve_exhaustive(cfg, sc, grid_res=0.05)
        w_ex = compute_wsr(compute_channel(cfg, sc, ex.d), ex.p, cfg)
        init = initial_state(cfg, sc)
        opts = SolveOptions(max_outer_iters=100)
        for tr in (solve_transformed_ao(cfg, sc, init, opts), solve_ao_baseline(cfg, sc, init, opts)):
            worst = max(worst, (tr.best_wsr - w_ex) / w_ex)
    return worst <= 1e-6, f"largest relative excess over the grid optimum {worst:.1e}"


def run_all(seed=0, quick=False) -> list:
    n = 5 if quick else 20
    return [
        _timed("transform identities", lambda: transform_identities(seed)),
        _timed("lifted objective round trip", lambda: wsr_round_trip(seed)),
        _timed("gradient checks", lambda: gradient_suite(seed, n=n)),
        _timed("exhaustive dominance", lambda: exhaustive_dominance(seed, n=1 if quick else 3)),
    ]
