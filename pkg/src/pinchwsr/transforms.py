"""Fractional-programming reformulation of the weighted sum rate.

The rate ``log2(1 + SINR)`` is lifted with a Lagrangian-dual variable ``gamma``
and the remaining ratio ``SINR / (1 + SINR)`` with a quadratic-transform
variable ``y``. With both at their closed-form optima the lifted objective
equals the WSR, which is what the round-trip tests rely on.

Gradients with respect to complex beamformers follow the convention
``d/dRe + j d/dIm``. Every objective here is a function of the gain matrix
``A = h^H p``; its gradient ``Gamma = dF/dA`` gives ``dF/dp = h @ Gamma``,
and ``dF/dd`` through the channel derivative. The ``*_pair`` helpers are
written against :mod:`pinchwsr.autodiff` so they run on numpy arrays or tape
variables alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BarrierDomainError, DomainError, InvalidParameterError, LinearizationError
from .system_model import (
    Scenario,
    SystemConfig,
    channel_derivative,
    channel_pair,
    compute_channel,
    compute_sinr,
    gain_matrix,
    pack_complex,
    pack_pair,
)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class AuxiliaryVars:
    gamma: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        g = np.maximum(np.asarray(self.gamma, dtype=float), 0.0)
        y = np.maximum(np.asarray(self.y, dtype=float), 0.0)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class PenaltyConfig:
    """Quadratic-penalty and log-barrier weights plus their growth schedules."""

    mu: float = 10.0
    barrier_t: float = 1.0
    mu_growth: float = 2.0
    mu_every: int = 50
    mu_cap: float = 1e4
    t_growth: float = 5.0
    t_cap: float = 1e6

    def __post_init__(self):
        if not self.mu >= 0:
            raise InvalidParameterError("penalty factor must be non-negative")
        if not self.barrier_t > 0:
            raise InvalidParameterError("barrier parameter must be positive")

    def mu_at(self, iteration: int) -> float:
        return min(self.mu * self.mu_growth ** (iteration // self.mu_every), max(self.mu, self.mu_cap))

    def t_at(self, rnd: int) -> float:
        return min(self.barrier_t * self.t_growth**rnd, max(self.barrier_t, self.t_cap))


@dataclass(frozen=True)
class LinearizationPoint:
    """Snapshot of the beamformer around which ``sqrt(G)`` and ``I`` are expanded."""

    p_anchor: np.ndarray
    A_anchor: np.ndarray
    G_anchor: np.ndarray
    I_anchor: np.ndarray

    @classmethod
    def at(cls, h, p) -> "LinearizationPoint":
        A = gain_matrix(h, p)
        a2 = np.abs(A) ** 2
        G = np.diag(a2).copy()
        return cls(np.array(p, copy=True), A, G, a2.sum(axis=1) - G)


# -- scalar transforms -------------------------------------------------------


def dual_rate_value(gamma, sinr):
    """Lagrangian-dual lift of ``log2(1 + sinr)``; maximal (and exact) at ``gamma == sinr``."""
    gamma = np.asarray(gamma, dtype=float)
    sinr = np.asarray(sinr, dtype=float)
    if np.any(gamma < 0) or np.any(sinr < 0):
        raise DomainError("gamma and sinr must be non-negative")
    # (1 + g) s / (1 + s) - g rewritten as (s - g) / (1 + s) to avoid cancellation
    return np.log2(1.0 + gamma) + (sinr - gamma) / (LN2 * (1.0 + sinr))


def quadratic_fraction_value(y, G, I, noise):
    """Quadratic-transform lift of ``G / (G + I + noise)``."""
    y, G, I = (np.asarray(v, dtype=float) for v in (y, G, I))
    if np.any(y < 0) or np.any(G < 0) or np.any(I < 0):
        raise DomainError("y, G and I must be non-negative")
    if not np.all(np.asarray(noise) > 0):
        raise DomainError("noise power must be positive")
    return 2.0 * y * np.sqrt(G) - y * y * (G + I + noise)


def update_auxiliaries(G, I, noise) -> AuxiliaryVars:
    G = np.asarray(G, dtype=float)
    I = np.asarray(I, dtype=float)
    return AuxiliaryVars(G / (I + noise), np.sqrt(np.maximum(G, 0.0)) / (G + I + noise))


def auxiliaries_for(h, p, noise) -> AuxiliaryVars:
    G, I, _ = compute_sinr(h, p, noise)
    return update_auxiliaries(G, I, noise)


def bracket_weights(aux: AuxiliaryVars, cfg: SystemConfig) -> np.ndarray:
    """Per-user factor ``w (1 + gamma) / ln 2`` in front of the quadratic bracket."""
    return cfg.weights * (1.0 + aux.gamma) / LN2


def transformed_objective(h, p, aux: AuxiliaryVars, cfg: SystemConfig) -> float:
    G, I, _ = compute_sinr(h, p, cfg.noise_power)
    q = 2.0 * aux.y * np.sqrt(G) - aux.y**2 * (G + I + cfg.noise_power)
    lead = np.log2(1.0 + aux.gamma) - aux.gamma / LN2
    return float(np.sum(cfg.weights * (lead + (1.0 + aux.gamma) / LN2 * q)))


# -- linearisation and the beamforming surrogate ----------------------------


def _check_anchor(lin: LinearizationPoint):
    if np.any(lin.G_anchor <= 0):
        raise LinearizationError("signal power at the anchor is zero; sqrt(G) is not differentiable")


def linearize(h, lin: LinearizationPoint, p):
    """First-order expansions of ``sqrt(G_m)`` and ``I_m`` around the anchor.

    Returns ``(sqrtG_lin, I_lin)``; add the noise power to ``I_lin`` for the
    approximated interference-plus-noise term used by the QoS penalty.
    """
    _check_anchor(lin)
    A = gain_matrix(h, p)
    At = lin.A_anchor
    lin_terms = np.real(np.conj(At) * (A - At))
    sg = np.sqrt(lin.G_anchor) + np.diag(lin_terms) / np.sqrt(lin.G_anchor)
    off = lin_terms.sum(axis=1) - np.diag(lin_terms)
    return sg, lin.I_anchor + 2.0 * off


def _penalty_violation(cfg: SystemConfig, G, I_app):
    # measured in units of the noise power so that mu is dimensionless
    return np.maximum(0.0, cfg.sinr_min * I_app - G) / cfg.noise_power


def surrogate_p_objective(h, p, lin: LinearizationPoint, aux: AuxiliaryVars, cfg: SystemConfig) -> float:
    sg, I_lin = linearize(h, lin, p)
    G, _, _ = compute_sinr(h, p, cfg.noise_power)
    c = bracket_weights(aux, cfg)
    return float(np.sum(c * (2.0 * aux.y * sg - aux.y**2 * (G + I_lin + cfg.noise_power))))


def penalized_p_objective(h, p, lin, aux, cfg: SystemConfig, pen: PenaltyConfig) -> float:
    _, I_lin = linearize(h, lin, p)
    G, _, _ = compute_sinr(h, p, cfg.noise_power)
    V = _penalty_violation(cfg, G, I_lin + cfg.noise_power)
    return surrogate_p_objective(h, p, lin, aux, cfg) - pen.mu * float(np.sum(V**2))


def _row(v, M):
    return ad.reshape(v, (M, 1))


def _gains_pair(h, p, M):
    A = ad.cconj_matmul(h, p)
    a2 = ad.cabs2(A)
    eye = np.eye(M)
    G = ad.sum_(a2 * eye, axis=1)
    I = ad.sum_(a2, axis=1) - G
    return A, G, I


def surrogate_gamma_pair(h, p, lin: LinearizationPoint, aux: AuxiliaryVars, cfg: SystemConfig, mu: float):
    """``dF/dA`` of the penalized surrogate as an ``(re, im)`` pair."""
    M = cfg.M
    A, G, _ = _gains_pair(h, p, M)
    Atr, Ati = lin.A_anchor.real, lin.A_anchor.imag
    eye = np.eye(M)
    off = 1.0 - eye
    c = bracket_weights(aux, cfg)
    y = aux.y
    sgt = np.sqrt(lin.G_anchor)
    lin_terms = Atr * (A[0] - Atr) + Ati * (A[1] - Ati)
    I_lin = lin.I_anchor + 2.0 * ad.sum_(lin_terms * off, axis=1)
    V = ad.relu(cfg.sinr_min * (I_lin + cfg.noise_power) - G) / cfg.noise_power
    pen = _row(V * (4.0 * mu / cfg.noise_power), M)
    lead = (2.0 * c * y / sgt)[:, None]
    quad = (2.0 * c * y * y)[:, None]
    pen_off = _row(V * cfg.sinr_min * (4.0 * mu / cfg.noise_power), M)
    gr = eye * (lead * Atr - quad * A[0] + pen * A[0]) - off * (quad * Atr + pen_off * Atr)
    gi = eye * (lead * Ati - quad * A[1] + pen * A[1]) - off * (quad * Ati + pen_off * Ati)
    return gr, gi


def grad_penalized_p_pair(h, p, lin, aux, cfg, mu):
    _check_anchor(lin)
    return ad.cmatmul(h, surrogate_gamma_pair(h, p, lin, aux, cfg, mu))


def grad_penalized_p(h, p, lin, aux, cfg: SystemConfig, pen: PenaltyConfig) -> np.ndarray:
    """Gradient of the penalized surrogate, packed as ``2 K M`` reals."""
    g = grad_penalized_p_pair(ad.to_pair(h), ad.to_pair(p), lin, aux, cfg, pen.mu)
    return pack_complex(ad.from_pair(g))


def penalized_p_objective_pair(h, p, lin, aux, cfg, mu):
    """Tape-compatible value of :func:`penalized_p_objective`."""
    M = cfg.M
    A, G, _ = _gains_pair(h, p, M)
    Atr, Ati = lin.A_anchor.real, lin.A_anchor.imag
    off = 1.0 - np.eye(M)
    lin_terms = Atr * (A[0] - Atr) + Ati * (A[1] - Ati)
    sgt = np.sqrt(lin.G_anchor)
    sg = sgt + ad.sum_(lin_terms * np.eye(M), axis=1) / sgt
    I_lin = lin.I_anchor + 2.0 * ad.sum_(lin_terms * off, axis=1)
    c = bracket_weights(aux, cfg)
    f = ad.sum_(c * (2.0 * aux.y * sg - aux.y**2 * (G + I_lin + cfg.noise_power)))
    V = ad.relu(cfg.sinr_min * (I_lin + cfg.noise_power) - G) / cfg.noise_power
    return f - mu * ad.sum_(ad.square(V))


def lifted_p_objective(h, p, aux: AuxiliaryVars, cfg: SystemConfig, mu: float = 0.0) -> float:
    """Lifted bracket with exact ``G`` and ``I`` minus the squared QoS penalty.

    This is the quantity the surrogate approximates; the solvers use it to
    accept or reject surrogate steps.
    """
    G, I, _ = compute_sinr(h, p, cfg.noise_power)
    c = bracket_weights(aux, cfg)
    f = float(np.sum(c * (2.0 * aux.y * np.sqrt(G) - aux.y**2 * (G + I + cfg.noise_power))))
    V = _penalty_violation(cfg, G, I + cfg.noise_power)
    return f - mu * float(np.sum(V**2))


# -- log barrier -------------------------------------------------------------


def barrier_p_objective_and_grad(h, p, lin, aux, cfg: SystemConfig, pen: PenaltyConfig, t: float | None = None):
    """Penalized surrogate plus ``(1/t) log(P_total - sum |p|^2)``.

    The log term tends to minus infinity at the power boundary, which keeps a
    maximising ascent strictly inside the ball.
    """
    t = pen.barrier_t if t is None else t
    pw = float(np.sum(np.abs(p) ** 2))
    slack = cfg.total_power - pw
    if not slack > 0:
        raise BarrierDomainError(f"power slack {slack:g} is not strictly positive")
    Z = penalized_p_objective(h, p, lin, aux, cfg, pen) + math.log(slack) / t
    g = grad_penalized_p(h, p, lin, aux, cfg, pen) - pack_complex(2.0 * np.asarray(p) / (t * slack))
    return Z, g


# -- antenna-position objective ----------------------------------------------


def position_gamma_pair(A, aux: AuxiliaryVars, cfg: SystemConfig):
    M = cfg.M
    eye = np.eye(M)
    a2 = ad.cabs2(A)
    mag = ad.sqrt(ad.sum_(a2 * eye, axis=1))
    c = bracket_weights(aux, cfg)
    lead = _row(2.0 * c * aux.y / mag, M)
    quad = (2.0 * c * aux.y**2)[:, None]
    return eye * lead * A[0] - quad * A[0], eye * lead * A[1] - quad * A[1]


def position_bracket_pair(h, p, aux: AuxiliaryVars, cfg: SystemConfig):
    _, G, I = _gains_pair(h, p, cfg.M)
    c = bracket_weights(aux, cfg)
    return ad.sum_(c * (2.0 * aux.y * ad.sqrt(G) - aux.y**2 * (G + I + cfg.noise_power)))


def position_objective(cfg: SystemConfig, sc: Scenario, d, p, aux: AuxiliaryVars) -> float:
    h = compute_channel(cfg, sc, d)
    G, I, _ = compute_sinr(h, p, cfg.noise_power)
    c = bracket_weights(aux, cfg)
    return float(np.sum(c * (2.0 * aux.y * np.sqrt(G) - aux.y**2 * (G + I + cfg.noise_power))))


def position_objective_and_grad(cfg: SystemConfig, sc: Scenario, d, p, aux: AuxiliaryVars):
    """Position objective and its gradient by reverse sweep through the channel."""
    d = np.asarray(d, dtype=float)
    value = position_objective(cfg, sc, d, p, aux)
    pp = ad.to_pair(p)
    _, g = ad.gradient(lambda x: position_bracket_pair(channel_pair(cfg, sc, x), pp, aux, cfg), d)
    return value, g


def grad_d_from_gamma(cfg: SystemConfig, sc: Scenario, d, p, Gamma):
    """``dF/dd`` for an objective with ``dF/dA = Gamma`` (closed form, tape-compatible).

    ``dF/dd_k = sum_m Re(conj(h'_km) Q_km)`` with ``Q = p conj(Gamma)^T``.
    """
    dh = channel_derivative(cfg, sc, d)
    Gc = (ad.transpose(Gamma[0]), ad.neg(ad.transpose(Gamma[1])))
    Q = ad.cmatmul(p, Gc)
    return ad.sum_(dh[0] * Q[0] + dh[1] * Q[1], axis=1)


def position_grad_pair(cfg: SystemConfig, sc: Scenario, d, p, aux: AuxiliaryVars):
    h = channel_pair(cfg, sc, d)
    A = ad.cconj_matmul(h, p)
    return grad_d_from_gamma(cfg, sc, d, p, position_gamma_pair(A, aux, cfg))


# -- raw penalized WSR (no transforms) -------------------------------------


def _raw_violation(cfg, G, I):
    return ad.relu(cfg.sinr_min * (I + cfg.noise_power) - G) / cfg.noise_power


def penalized_wsr_pair(h, p, cfg: SystemConfig, mu: float):
    """Raw WSR minus ``mu * sum V_m`` with ``V_m = max(0, gmin (I + noise) - G) / noise``."""
    _, G, I = _gains_pair(h, p, cfg.M)
    T = G + I + cfg.noise_power
    rate = ad.sum_(cfg.weights * (ad.log(T) - ad.log(I + cfg.noise_power))) / LN2
    return rate - mu * ad.sum_(_raw_violation(cfg, G, I))


def penalized_wsr(cfg: SystemConfig, sc: Scenario, d, p, mu: float) -> float:
    h = compute_channel(cfg, sc, d)
    G, I, sinr = compute_sinr(h, p, cfg.noise_power)
    V = np.maximum(0.0, cfg.sinr_min * (I + cfg.noise_power) - G) / cfg.noise_power
    return float(np.sum(cfg.weights * np.log2(1.0 + sinr)) - mu * np.sum(V))


def raw_gamma_pair(A, cfg: SystemConfig, mu: float):
    """``dE/dA`` for the raw penalized WSR."""
    M = cfg.M
    eye = np.eye(M)
    off = 1.0 - eye
    a2 = ad.cabs2(A)
    G = ad.sum_(a2 * eye, axis=1)
    I = ad.sum_(a2, axis=1) - G
    T = G + I + cfg.noise_power
    U = I + cfg.noise_power
    w = cfg.weights / LN2
    coef = _row(2.0 * w / T, M) - off * _row(2.0 * w / U, M)
    active = (ad.value(cfg.sinr_min * U - G) > 0).astype(float)
    pen = (2.0 * mu / cfg.noise_power) * active
    coef = coef - off * (pen * cfg.sinr_min)[:, None] + eye * pen[:, None]
    return coef * A[0], coef * A[1]


def raw_grads_pair(cfg: SystemConfig, sc: Scenario, d, p, mu: float):
    """Closed-form ``(dE/dp as pair, dE/dd)`` of the raw penalized WSR."""
    h = channel_pair(cfg, sc, d)
    A = ad.cconj_matmul(h, p)
    Gm = raw_gamma_pair(A, cfg, mu)
    return ad.cmatmul(h, Gm), grad_d_from_gamma(cfg, sc, d, p, Gm)


def penalized_wsr_and_grads(cfg: SystemConfig, sc: Scenario, d, p, mu: float):
    """Raw penalized WSR with gradients in ``p`` (complex) and ``d`` from one reverse sweep."""
    tape = ad.Tape()
    pr = tape.var(np.real(p))
    pi = tape.var(np.imag(p))
    dv = tape.var(d)
    out = penalized_wsr_pair(channel_pair(cfg, sc, dv), (pr, pi), cfg, mu)
    adj = tape.backward(out)
    return float(out.value), adj[pr] + 1j * adj[pi], adj[dv]
