"""Non-learned solvers: alternating optimisation variants, GD, barrier method,
a random baseline and a grid-search oracle.

All iterative solvers share the same step rule. A trial step along the
gradient moves at most a trust radius (relative to ``||p||`` for beamformers,
in metres for positions); it is halved until the block objective does not
decrease. Beamformers are renormalised to full power and positions are
clamped into the box after every step, so every recorded iterate is feasible
for the power and position constraints.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import BarrierDomainError, GridTooLargeError, InvalidParameterError, NormalizationError
from .system_model import (
    Scenario,
    SolutionState,
    SystemConfig,
    compute_channel,
    compute_sinr,
    compute_wsr,
    normalize_power,
    project_positions,
    total_power,
)
from .transforms import (
    LN2,
    LinearizationPoint,
    PenaltyConfig,
    auxiliaries_for,
    barrier_p_objective_and_grad,
    grad_penalized_p,
    lifted_p_objective,
    penalized_wsr,
    penalized_wsr_and_grads,
    position_objective,
    position_objective_and_grad,
    transformed_objective,
)
from .system_model import unpack_complex


@dataclass(frozen=True)
class SolveOptions:
    max_outer_iters: int = 500
    inner_iters_p: int = 10
    inner_iters_d: int = 10
    step_p: float = 0.2
    step_d: float = 0.5
    pen: PenaltyConfig = field(default_factory=PenaltyConfig)
    seed: int = 0
    tol: float = 0.0
    tol_window: int = 20
    max_halvings: int = 30

    def __post_init__(self):
        if self.max_outer_iters < 0:
            raise InvalidParameterError("max_outer_iters must be >= 0")
        if self.inner_iters_p < 1 or self.inner_iters_d < 1:
            raise InvalidParameterError("inner iteration counts must be >= 1")
        if not (self.step_p > 0 and self.step_d > 0):
            raise InvalidParameterError("step sizes must be positive")

    def replace(self, **kw) -> "SolveOptions":
        return replace(self, **kw)


@dataclass
class IterRecord:
    iter: int
    wsr: float
    best_wsr: float
    objective: float
    power_slack: float
    min_qos_slack: float
    box_violation: float
    wall_time: float
    power_budget: float = math.nan
    interior: bool = False

    def feasible(self, rtol: float = 1e-9) -> bool:
        """Box exact and power on the budget (strictly inside it for interior runs)."""
        if self.box_violation != 0.0:
            return False
        if self.interior:
            return self.power_slack > 0
        return abs(self.power_slack) <= rtol * self.power_budget


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    final: Optional[SolutionState] = None
    best: Optional[SolutionState] = None
    best_wsr: float = -np.inf

    @property
    def wsr(self) -> np.ndarray:
        return np.array([r.wsr for r in self.records])

    @property
    def best_curve(self) -> np.ndarray:
        return np.array([r.best_wsr for r in self.records])


class _Recorder:
    def __init__(self, cfg: SystemConfig, sc: Scenario, interior: bool = False):
        self.cfg = cfg
        self.sc = sc
        self.interior = interior
        self.traj = Trajectory()
        self.t0 = time.perf_counter()

    def __call__(self, it: int, state: SolutionState, objective: float, h=None):
        cfg = self.cfg
        if h is None:
            h = compute_channel(cfg, self.sc, state.d)
        _, _, sinr = compute_sinr(h, state.p, cfg.noise_power)
        wsr = float(np.sum(cfg.weights * np.log2(1.0 + sinr)))
        if wsr > self.traj.best_wsr:
            self.traj.best_wsr = wsr
            self.traj.best = state.copy()
        d = state.d
        self.traj.records.append(
            IterRecord(
                iter=it,
                wsr=wsr,
                best_wsr=self.traj.best_wsr,
                objective=float(objective),
                power_slack=cfg.total_power - total_power(state.p),
                min_qos_slack=float(np.min(sinr - cfg.sinr_min)),
                box_violation=float(max(np.max(cfg.x_min - d), np.max(d - cfg.x_max), 0.0)),
                wall_time=time.perf_counter() - self.t0,
                power_budget=cfg.total_power,
                interior=self.interior,
            )
        )
        self.traj.final = state.copy()
        return wsr

    def converged(self, tol: float, window: int) -> bool:
        recs = self.traj.records
        if tol <= 0 or len(recs) <= window:
            return False
        return recs[-1].best_wsr - recs[-1 - window].best_wsr < tol


class _Trust:
    """Trust radius that doubles after an accepted step, up to its ceiling."""

    def __init__(self, ceiling: float):
        self.ceiling = ceiling
        self.r = ceiling

    def trial(self):
        return self.r

    def accept(self, r):
        self.r = min(2.0 * r, self.ceiling)

    def reject_all(self, r):
        self.r = max(r, 1e-12 * self.ceiling)


def _ascend(value: Callable, x, g, f0, move: Callable, trust: _Trust, max_halvings: int):
    """Backtracking ascent along ``g``; ``move(x, g, r)`` builds the trial point."""
    r = trust.trial()
    for _ in range(max_halvings):
        cand = move(x, g, r)
        f1 = value(cand)
        if f1 >= f0:
            trust.accept(r)
            return cand, f1
        r *= 0.5
    trust.reject_all(r)
    return x, f0


def _p_move(p_total):
    def move(p, g, r):
        gn = np.linalg.norm(g)
        if gn == 0:
            return p
        return normalize_power(p + (r * np.linalg.norm(p) / gn) * g, p_total)

    return move


def _d_move(box):
    def move(d, g, r):
        gm = np.max(np.abs(g))
        if gm == 0:
            return d
        return project_positions(d + (r / gm) * g, box)

    return move


def initial_state(
    cfg: SystemConfig,
    sc: Scenario,
    mode: str = "matched",
    seed: int = 0,
    power_fraction: float = 1.0,
    d: Optional[np.ndarray] = None,
) -> SolutionState:
    """Starting point shared by the iterative solvers.

    ``d`` defaults to equally spaced positions in the box. ``mode='matched'``
    uses matched-filter beams ``h_m / ||h_m||`` with equal power per user;
    ``mode='random'`` draws complex Gaussian beams from ``seed``.
    """
    width = cfg.x_max - cfg.x_min
    if d is None:
        d = cfg.x_min + (np.arange(cfg.K) + 0.5) * width / cfg.K
    d = project_positions(d, cfg.box)
    if mode == "matched":
        h = compute_channel(cfg, sc, d)
        p = h / np.linalg.norm(h, axis=0, keepdims=True)
    elif mode == "random":
        rng = np.random.default_rng(seed)
        p = rng.standard_normal((cfg.K, cfg.M)) + 1j * rng.standard_normal((cfg.K, cfg.M))
    else:
        raise InvalidParameterError(f"unknown init mode {mode!r}")
    p = normalize_power(p, cfg.total_power * power_fraction)
    return SolutionState(p=p, d=d)


def _check_init(cfg, init: SolutionState):
    if not np.any(np.abs(init.p) > 0):
        raise NormalizationError("initial beamformer is all zeros")
    if np.shape(init.d) != (cfg.K,):
        raise InvalidParameterError("initial positions have the wrong length")


# -- alternating optimisation on the transformed problem ---------------------


def _position_block(cfg, sc, state: SolutionState, aux, opts: SolveOptions, trust: _Trust):
    d = state.d
    p = state.p
    f0, g = position_objective_and_grad(cfg, sc, d, p, aux)
    move = _d_move(cfg.box)
    for _ in range(opts.inner_iters_d):
        d, f1 = _ascend(lambda x: position_objective(cfg, sc, x, p, aux), d, g, f0, move, trust, opts.max_halvings)
        if f1 == f0:
            break
        f0, g = position_objective_and_grad(cfg, sc, d, p, aux)
    return d


def solve_transformed_ao(cfg: SystemConfig, sc: Scenario, init: SolutionState, opts: SolveOptions = SolveOptions()) -> Trajectory:
    """Alternate closed-form auxiliary updates, surrogate ascent on ``p`` and
    projected ascent on ``d`` over the lifted problem."""
    _check_init(cfg, init)
    rec = _Recorder(cfg, sc)
    state = SolutionState(normalize_power(init.p, cfg.total_power), project_positions(init.d, cfg.box))
    h = compute_channel(cfg, sc, state.d)
    aux = auxiliaries_for(h, state.p, cfg.noise_power)
    rec(0, state, transformed_objective(h, state.p, aux, cfg), h)
    tp, td = _Trust(opts.step_p), _Trust(opts.step_d)
    move_p = _p_move(cfg.total_power)
    for it in range(1, opts.max_outer_iters + 1):
        aux = auxiliaries_for(h, state.p, cfg.noise_power)
        state.gamma, state.y = aux.gamma, aux.y
        lin = LinearizationPoint.at(h, state.p)
        pen = replace(opts.pen, mu=opts.pen.mu_at(it))
        p = state.p
        val = lambda q: lifted_p_objective(h, q, aux, cfg, pen.mu)
        f0 = val(p)
        for _ in range(opts.inner_iters_p):
            g = unpack_complex(grad_penalized_p(h, p, lin, aux, cfg, pen), cfg.K, cfg.M)
            p, f1 = _ascend(val, p, g, f0, move_p, tp, opts.max_halvings)
            if f1 == f0:
                break
            f0 = f1
        state.p = p
        state.d = _position_block(cfg, sc, state, aux, opts, td)
        h = compute_channel(cfg, sc, state.d)
        rec(it, state, transformed_objective(h, state.p, aux, cfg), h)
        if rec.converged(opts.tol, opts.tol_window):
            break
    return rec.traj


# -- baselines on the raw penalized WSR --------------------------------------


def solve_ao_baseline(cfg: SystemConfig, sc: Scenario, init: SolutionState, opts: SolveOptions = SolveOptions()) -> Trajectory:
    """Alternating projected-gradient ascent on the penalized WSR, without the
    fractional-programming lift. Gradients come from the autodiff tape."""
    _check_init(cfg, init)
    rec = _Recorder(cfg, sc)
    state = SolutionState(normalize_power(init.p, cfg.total_power), project_positions(init.d, cfg.box))
    mu = opts.pen.mu_at(0)
    rec(0, state, penalized_wsr(cfg, sc, state.d, state.p, mu))
    tp, td = _Trust(opts.step_p), _Trust(opts.step_d)
    move_p, move_d = _p_move(cfg.total_power), _d_move(cfg.box)
    for it in range(1, opts.max_outer_iters + 1):
        mu = opts.pen.mu_at(it)
        p, d = state.p, state.d
        f0, gp, _ = penalized_wsr_and_grads(cfg, sc, d, p, mu)
        for _ in range(opts.inner_iters_p):
            p, f1 = _ascend(lambda q: penalized_wsr(cfg, sc, d, q, mu), p, gp, f0, move_p, tp, opts.max_halvings)
            if f1 == f0:
                break
            f0, gp, _ = penalized_wsr_and_grads(cfg, sc, d, p, mu)
        f0, _, gd = penalized_wsr_and_grads(cfg, sc, d, p, mu)
        for _ in range(opts.inner_iters_d):
            d, f1 = _ascend(lambda x: penalized_wsr(cfg, sc, x, p, mu), d, gd, f0, move_d, td, opts.max_halvings)
            if f1 == f0:
                break
            f0, _, gd = penalized_wsr_and_grads(cfg, sc, d, p, mu)
        state.p, state.d = p, d
        rec(it, state, f0)
        if rec.converged(opts.tol, opts.tol_window):
            break
    return rec.traj


def solve_gd(cfg: SystemConfig, sc: Scenario, init: SolutionState, opts: SolveOptions = SolveOptions(), lag: int = 1) -> Trajectory:
    """Simultaneous gradient steps on ``p`` and ``d`` using iterates delayed by ``lag``.

    Step ``k`` uses the partner block from iteration ``max(k - lag, 0)``. No
    line search: the trust radius decays as ``1 / sqrt(k + 1)``.
    """
    if lag < 0:
        raise InvalidParameterError("lag must be non-negative")
    if opts.max_outer_iters and lag >= opts.max_outer_iters:
        raise InvalidParameterError("lag must be smaller than the iteration budget")
    _check_init(cfg, init)
    rec = _Recorder(cfg, sc)
    state = SolutionState(normalize_power(init.p, cfg.total_power), project_positions(init.d, cfg.box))
    hist_p, hist_d = [state.p], [state.d]
    rec(0, state, penalized_wsr(cfg, sc, state.d, state.p, opts.pen.mu_at(0)))
    move_p, move_d = _p_move(cfg.total_power), _d_move(cfg.box)
    for k in range(opts.max_outer_iters):
        mu = opts.pen.mu_at(k)
        tau = max(k - lag, 0)
        p, d = hist_p[k], hist_d[k]
        _, gp, _ = penalized_wsr_and_grads(cfg, sc, hist_d[tau], p, mu)
        _, _, gd = penalized_wsr_and_grads(cfg, sc, d, hist_p[tau], mu)
        decay = 1.0 / math.sqrt(k + 1)
        p_new = move_p(p, gp, opts.step_p * decay)
        d_new = move_d(d, gd, opts.step_d * decay)
        hist_p.append(p_new)
        hist_d.append(d_new)
        state = SolutionState(p_new, d_new)
        rec(k + 1, state, penalized_wsr(cfg, sc, d_new, p_new, mu))
        if rec.converged(opts.tol, opts.tol_window):
            break
    return rec.traj


# -- barrier method ------------------------------------------------------------


def solve_et_ca(cfg: SystemConfig, sc: Scenario, init: SolutionState, opts: SolveOptions = SolveOptions()) -> Trajectory:
    """Lifted problem with the power budget handled by a log barrier.

    Beamformers are never renormalised; every iterate stays strictly inside
    the power ball. The barrier weight ``1/t`` shrinks on the schedule in
    ``opts.pen``.
    """
    _check_init(cfg, init)
    if not total_power(init.p) < cfg.total_power:
        raise BarrierDomainError("initial beamformer must lie strictly inside the power ball")
    rec = _Recorder(cfg, sc, interior=True)
    state = SolutionState(np.array(init.p, dtype=complex), project_positions(init.d, cfg.box))
    h = compute_channel(cfg, sc, state.d)
    aux = auxiliaries_for(h, state.p, cfg.noise_power)
    rec(0, state, transformed_objective(h, state.p, aux, cfg), h)
    tp, td = _Trust(opts.step_p), _Trust(opts.step_d)
    K, M = cfg.K, cfg.M

    def move(p, g, r):
        gn = np.linalg.norm(g)
        return p if gn == 0 else p + (r * np.linalg.norm(p) / gn) * g

    for it in range(1, opts.max_outer_iters + 1):
        aux = auxiliaries_for(h, state.p, cfg.noise_power)
        state.gamma, state.y = aux.gamma, aux.y
        lin = LinearizationPoint.at(h, state.p)
        pen = replace(opts.pen, mu=opts.pen.mu_at(it))
        t = opts.pen.t_at(it - 1)

        def Z(q):
            slack = cfg.total_power - total_power(q)
            if not slack > 0:
                return -np.inf
            return lifted_p_objective(h, q, aux, cfg, pen.mu) + math.log(slack) / t

        p = state.p
        f0 = Z(p)
        for _ in range(opts.inner_iters_p):
            _, g = barrier_p_objective_and_grad(h, p, lin, aux, cfg, pen, t)
            p, f1 = _ascend(Z, p, unpack_complex(g, K, M), f0, move, tp, opts.max_halvings)
            if f1 == f0:
                break
            f0 = f1
        state.p = p
        state.d = _position_block(cfg, sc, state, aux, opts, td)
        h = compute_channel(cfg, sc, state.d)
        rec(it, state, transformed_objective(h, state.p, aux, cfg), h)
        if rec.converged(opts.tol, opts.tol_window):
            break
    return rec.traj


# -- non-iterative baselines ---------------------------------------------------


def solve_udb(cfg: SystemConfig, sc: Scenario, seed: int = 0) -> SolutionState:
    """Equally spaced antennas and a random full-power beamformer."""
    return initial_state(cfg, sc, mode="random", seed=seed)


def _batched_raw_ascent(cfg: SystemConfig, h, p0, iters: int, mu: float):
    """Penalized-WSR ascent for a batch of channels ``h`` of shape ``(B, K, M)``.

    Each batch member keeps its own relative step, grown after an improving
    step and halved otherwise, so all members are independent of each other.
    """
    B = h.shape[0]
    hH = np.conj(np.swapaxes(h, 1, 2))
    eye = np.eye(cfg.M)
    off = 1.0 - eye
    w = cfg.weights / LN2
    sig = cfg.noise_power
    gmin = cfg.sinr_min

    def evaluate(p):
        A = hH @ p
        a2 = np.abs(A) ** 2
        G = np.einsum("bmm->bm", a2)
        I = a2.sum(axis=2) - G
        V = np.maximum(0.0, gmin * (I + sig) - G) / sig
        E = np.sum(w * (np.log(G + I + sig) - np.log(I + sig)), axis=1) - mu * V.sum(axis=1)
        return E, A, G, I

    def grad(A, G, I):
        T = (G + I + sig)[:, :, None]
        U = (I + sig)[:, :, None]
        coef = 2.0 * w[None, :, None] / T - off * 2.0 * w[None, :, None] / U
        active = (gmin * (I + sig) - G > 0).astype(float)[:, :, None]
        pen = 2.0 * mu / sig * active
        coef = coef - off * pen * gmin[None, :, None] + eye * pen
        return h @ (coef * A)

    def normalize(p):
        s = np.sqrt(np.sum(np.abs(p) ** 2, axis=(1, 2), keepdims=True))
        return p * (math.sqrt(cfg.total_power) / s)

    p = normalize(p0)
    E, A, G, I = evaluate(p)
    r = np.full(B, 0.5)
    for _ in range(iters):
        g = grad(A, G, I)
        gn = np.sqrt(np.sum(np.abs(g) ** 2, axis=(1, 2)))
        pn = math.sqrt(cfg.total_power)
        scale = np.where(gn > 0, r * pn / np.where(gn > 0, gn, 1.0), 0.0)
        cand = normalize(p + scale[:, None, None] * g)
        E1, A1, G1, I1 = evaluate(cand)
        ok = E1 >= E
        p = np.where(ok[:, None, None], cand, p)
        E = np.where(ok, E1, E)
        A = np.where(ok[:, None, None], A1, A)
        G = np.where(ok[:, None], G1, G)
        I = np.where(ok[:, None], I1, I)
        r = np.where(ok, np.minimum(2.0 * r, 0.5), 0.5 * r)
    wsr = np.sum(cfg.weights * np.log2(1.0 + G / (I + sig)), axis=1)
    return p, wsr



def grid_points(cfg: SystemConfig, grid_res: float) -> np.ndarray:
    n = int(math.floor((cfg.x_max - cfg.x_min) / grid_res + 1e-9)) + 1
    return cfg.x_min + grid_res * np.arange(n)


def solve_exhaustive(
    cfg: SystemConfig,
    sc: Scenario,
    grid_res: float = 0.05,
    opts: SolveOptions = SolveOptions(),
    restarts: int = 5,
    bf_iters: int = 300,
    polish: bool = True,
    polish_top: int = 3,
    max_points: int = 1_000_000,
    batch: int = 2048,
) -> SolutionState:
    """Grid search over antenna positions with beamforming solved at every point.

    Grid points are enumerated in lexicographic order of ``d`` and ties go to
    the first point. With ``polish`` the best few grid cells are refined by
    :func:`solve_ao_baseline`; the refined state replaces the grid optimum
    only if its WSR is higher.
    """
    axis = grid_points(cfg, grid_res)
    n_points = axis.size**cfg.K
    if n_points > max_points:
        raise GridTooLargeError(f"{n_points} grid points exceed the limit of {max_points}")
    rng = np.random.default_rng(opts.seed)
    starts = [None] + [
        rng.standard_normal((cfg.K, cfg.M)) + 1j * rng.standard_normal((cfg.K, cfg.M))
        for _ in range(max(restarts - 1, 0))
    ]
    best_wsr = np.full(n_points, -np.inf)
    best_p = np.zeros((n_points, cfg.K, cfg.M), dtype=complex)
    for lo in range(0, n_points, batch):
        idx = np.arange(lo, min(lo + batch, n_points))
        D = axis[np.stack(np.unravel_index(idx, (axis.size,) * cfg.K), axis=1)]
        H = np.stack([compute_channel(cfg, sc, dd) for dd in D])
        for s in starts:
            if s is None:
                p0 = H / np.linalg.norm(H, axis=1, keepdims=True)
            else:
                p0 = np.broadcast_to(s, H.shape).copy()
            p, wsr = _batched_raw_ascent(cfg, H, p0, bf_iters, opts.pen.mu)
            better = wsr > best_wsr[idx]
            best_wsr[idx] = np.where(better, wsr, best_wsr[idx])
            best_p[idx] = np.where(better[:, None, None], p, best_p[idx])
    k = int(np.argmax(best_wsr))
    d_best = axis[np.array(np.unravel_index(k, (axis.size,) * cfg.K))]
    result = SolutionState(best_p[k], d_best)
    top_wsr = float(best_wsr[k])
    if polish:
        order = np.argsort(-best_wsr, kind="stable")[:polish_top]
        popts = opts.replace(max_outer_iters=max(opts.max_outer_iters, 200), tol=1e-9, tol_window=20, step_d=min(opts.step_d, grid_res))
        for j in order:
            dj = axis[np.array(np.unravel_index(int(j), (axis.size,) * cfg.K))]
            tr = solve_ao_baseline(cfg, sc, SolutionState(best_p[j], dj), popts)
            if tr.best_wsr > top_wsr:
                top_wsr = tr.best_wsr
                result = tr.best.copy()
    return result
