"""Gradient-fed unfolding networks and the meta-learning loops built on them.

Two small MLPs map objective gradients to bounded updates: ``BN`` acts on the
packed beamformer (``2 K M`` reals) and ``AN`` on antenna positions (``K``
reals). Each sub-task unrolls ``N_i`` beamformer steps followed by ``N_i``
position steps from a shared initial state; the mean of ``-WSR`` over the
sub-tasks of an epoch is backpropagated through the whole chain and the
network weights take one Adam step.

``gml_jo`` feeds the networks gradients of the transformed, linearised
objective. ``gml_baseline`` feeds them gradients of the raw penalised WSR.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, adam_step
from .errors import InvalidParameterError, ShapeError
from .solvers import IterRecord, Trajectory
from .system_model import (
    Scenario,
    SolutionState,
    SystemConfig,
    channel_pair,
    compute_channel,
    compute_sinr,
    normalize_pair,
    normalize_power,
    project_positions,
    total_power,
)
from .transforms import (
    LinearizationPoint,
    PenaltyConfig,
    auxiliaries_for,
    grad_penalized_p_pair,
    penalized_wsr_pair,
    position_grad_pair,
    raw_grads_pair,
)

CHECKPOINT_VERSION = 1
HIDDEN = 256
_GRAD_EPS = 1e-30
INPUT_NORMS = ("first", "unit", "none")


# -- networks ----------------------------------------------------------------


def _init_layers(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, (fan_out, fan_in))
        b = rng.uniform(-bound, bound, fan_out)
        layers += [W, b]
    return layers


@dataclass
class MetaNetParams:
    """Weights of both networks, stored as ``[W1, b1, W2, b2, W3, b3]`` lists."""

    K: int
    M: int
    bn: list
    an: list
    bn_adam: AdamState = field(default_factory=AdamState)
    an_adam: AdamState = field(default_factory=AdamState)
    seed: Optional[int] = None

    def __post_init__(self):
        self.bn = [np.asarray(a, dtype=float) for a in self.bn]
        self.an = [np.asarray(a, dtype=float) for a in self.an]
        _check_layers(self.bn, 2 * self.K * self.M, "BN")
        _check_layers(self.an, self.K, "AN")

    @classmethod
    def init(cls, K: int, M: int, seed: int = 0, hidden: int = HIDDEN, lr_p: float = 1e-3, lr_d: float = 1e-3) -> "MetaNetParams":
        rng = np.random.default_rng(seed)
        n = 2 * K * M
        bn = _init_layers(rng, [n, hidden, hidden, n])
        an = _init_layers(rng, [K, hidden, hidden, K])
        return cls(K, M, bn, an, AdamState(lr=lr_p), AdamState(lr=lr_d), seed)

    @classmethod
    def zeros(cls, K: int, M: int, hidden: int = HIDDEN) -> "MetaNetParams":
        n = 2 * K * M
        shape = lambda i, o: [np.zeros((o, i)), np.zeros(o)]
        bn = shape(n, hidden) + shape(hidden, hidden) + shape(hidden, n)
        an = shape(K, hidden) + shape(hidden, hidden) + shape(hidden, K)
        return cls(K, M, bn, an)

    def copy(self) -> "MetaNetParams":
        return MetaNetParams.from_dict(self.to_dict())

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.bn + self.an)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.bn + self.an])

    def with_flat(self, v) -> "MetaNetParams":
        v = np.asarray(v, dtype=float)
        if v.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} values, got {v.size}")
        out, k = [], 0
        for a in self.bn + self.an:
            out.append(v[k : k + a.size].reshape(a.shape))
            k += a.size
        nb = len(self.bn)
        return replace(self, bn=out[:nb], an=out[nb:])

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "K": self.K,
            "M": self.M,
            "seed": self.seed,
            "bn": [a.tolist() for a in self.bn],
            "an": [a.tolist() for a in self.an],
            "bn_adam": _adam_to_dict(self.bn_adam),
            "an_adam": _adam_to_dict(self.an_adam),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetaNetParams":
        if data.get("version") != CHECKPOINT_VERSION:
            raise InvalidParameterError(f"unsupported checkpoint version {data.get('version')!r}")
        return cls(
            data["K"],
            data["M"],
            [np.array(a, dtype=float) for a in data["bn"]],
            [np.array(a, dtype=float) for a in data["an"]],
            _adam_from_dict(data["bn_adam"]),
            _adam_from_dict(data["an_adam"]),
            data.get("seed"),
        )


def _check_layers(layers, n, name):
    if len(layers) != 6:
        raise ShapeError(f"{name} needs three (W, b) layers")
    W1, b1, W2, b2, W3, b3 = layers
    h = W1.shape[0]
    want = [(h, n), (h,), (h, h), (h,), (n, h), (n,)]
    for a, s in zip(layers, want):
        if a.shape != s:
            raise ShapeError(f"{name} layer shape {a.shape} != {s}")


def _adam_to_dict(s: AdamState) -> dict:
    d = asdict(s)
    d["m"] = [a.tolist() for a in s.m]
    d["v"] = [a.tolist() for a in s.v]
    return d


def _adam_from_dict(d: dict) -> AdamState:
    d = dict(d)
    d["m"] = [np.array(a, dtype=float) for a in d["m"]]
    d["v"] = [np.array(a, dtype=float) for a in d["v"]]
    return AdamState(**d)


def save_checkpoint(path, params: MetaNetParams, extra: Optional[dict] = None) -> Path:
    """Write networks, optimiser states and seeds as JSON.

    Floats go through ``repr`` precision via :mod:`json`, so loading returns
    bit-identical arrays.
    """
    path = Path(path)
    data = params.to_dict()
    data["extra"] = extra or {}
    path.write_text(json.dumps(data))
    return path


def load_checkpoint(path) -> tuple[MetaNetParams, dict]:
    data = json.loads(Path(path).read_text())
    return MetaNetParams.from_dict(data), data.get("extra", {})


def _mlp(layers, x):
    W1, b1, W2, b2, W3, b3 = layers
    h1 = ad.elu(ad.matmul(W1, x) + b1)
    h2 = ad.elu(ad.matmul(W2, h1) + b2)
    return ad.tanh(ad.matmul(W3, h2) + b3)


def bn_forward(params, g_p):
    """Beamformer update in ``[-1, 1]^{2KM}`` from the packed gradient.

    ``params`` is a :class:`MetaNetParams` or the raw BN layer list (possibly
    tape variables).
    """
    layers = params.bn if isinstance(params, MetaNetParams) else params
    n = ad.value(layers[0]).shape[1]
    if tuple(np.shape(ad.value(g_p))) != (n,):
        raise ShapeError(f"BN expects a length-{n} input, got shape {np.shape(ad.value(g_p))}")
    return _mlp(layers, g_p)


def an_forward(params, g_d):
    """Position update in ``[-1, 1]^K`` from the position gradient."""
    layers = params.an if isinstance(params, MetaNetParams) else params
    n = ad.value(layers[0]).shape[1]
    if tuple(np.shape(ad.value(g_d))) != (n,):
        raise ShapeError(f"AN expects a length-{n} input, got shape {np.shape(ad.value(g_d))}")
    return _mlp(layers, g_d)


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class MetaConfig:
    """Loop sizes, update scales and meta learning rates.

    ``lambda_p`` defaults to ``None``, meaning ``p_scale * sqrt(P_total / (K M))``.
    ``lambda_d`` is in metres. ``warm_start`` restarts each sub-task from its
    previous final state instead of the shared initial state; ``track_mid``
    also counts the state after the beamforming phase in the best-so-far.
    """

    n_epochs: int = 100
    n_tasks: int = 1
    n_inner: int = 10
    lambda_p: Optional[float] = None
    lambda_d: float = 0.05
    p_scale: float = 0.01
    lr_p: float = 1e-3
    lr_d: float = 1e-3
    pen: PenaltyConfig = field(default_factory=PenaltyConfig)
    input_norm: str = "first"
    truncate: bool = False
    refresh_aux: bool = False
    warm_start: bool = False
    track_mid: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_epochs", "n_tasks", "n_inner"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        for name in ("lr_p", "lr_d", "p_scale", "lambda_d"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.input_norm not in INPUT_NORMS:
            raise InvalidParameterError(f"input_norm must be one of {INPUT_NORMS}")
        if self.lambda_p is not None and not self.lambda_p > 0:
            raise InvalidParameterError("lambda_p must be positive")

    def replace(self, **kw) -> "MetaConfig":
        return replace(self, **kw)

    def steps(self, cfg: SystemConfig) -> tuple[float, float]:
        lp = self.lambda_p if self.lambda_p is not None else self.p_scale * math.sqrt(cfg.total_power / (cfg.K * cfg.M))
        return lp, self.lambda_d


@dataclass(frozen=True)
class SubTask:
    """One fixed channel realisation and the initial state all sub-tasks share."""

    scenario: Scenario
    init: SolutionState


@dataclass
class SubTaskResult:
    state: SolutionState
    loss: float
    wsr: float
    tape: Optional[ad.Tape] = None
    loss_var: Optional[ad.Var] = None
    leaves: Optional[tuple] = None
    mid: Optional[SolutionState] = None


@dataclass
class MetaResult:
    p_opt: np.ndarray
    d_opt: np.ndarray
    trajectory: Trajectory
    params: MetaNetParams
    losses: list = field(default_factory=list)

    @property
    def best_wsr(self) -> float:
        return self.trajectory.best_wsr


# -- unrolled sub-task -------------------------------------------------------


def _pack(pr, pi):
    # column-major, matching system_model.pack_complex
    return ad.concatenate([ad.reshape(ad.transpose(pr), (-1,)), ad.reshape(ad.transpose(pi), (-1,))])


def _unpack(v, K, M):
    n = K * M
    re = ad.transpose(ad.reshape(ad.getitem(v, slice(0, n)), (M, K)))
    im = ad.transpose(ad.reshape(ad.getitem(v, slice(n, 2 * n)), (M, K)))
    return re, im


class _InputScale:
    """Gradient-input scaling for one phase of a sub-task.

    'first' divides by the norm of the phase's first gradient, so inputs shrink
    as the iterate approaches a stationary point; 'unit' divides every input by
    its own norm; 'none' passes gradients through. The 'first' norm stays on the
    tape: for the position phase it depends on the BN output.
    """

    def __init__(self, mode):
        self.mode = mode
        self.scale = None

    def __call__(self, g):
        if self.mode == "none":
            return g
        if self.mode == "unit":
            return g / ad.sqrt(ad.sum_(ad.square(g)) + _GRAD_EPS)
        if self.scale is None:
            self.scale = ad.sqrt(ad.sum_(ad.square(g)) + _GRAD_EPS)
        return g / self.scale


def _detach(x, on):
    if not on:
        return x
    if isinstance(x, tuple):
        return tuple(ad.stop_gradient(a) for a in x)
    return ad.stop_gradient(x)


def _grads_transformed(cfg, sc, ctx):
    lin, aux, mu = ctx

    def gp(h, p, d):
        return grad_penalized_p_pair(h, p, lin, aux, cfg, mu)

    def gd(p, d):
        return position_grad_pair(cfg, sc, d, p, aux)

    return gp, gd


def _grads_raw(cfg, sc, mu):
    def gp(h, p, d):
        return raw_grads_pair(cfg, sc, d, p, mu)[0]

    def gd(p, d):
        return raw_grads_pair(cfg, sc, d, p, mu)[1]

    return gp, gd


def _unroll(cfg, task: SubTask, bn, an, meta: MetaConfig, kind: str, mu: float):
    sc = task.scenario
    K, M = cfg.K, cfg.M
    lam_p, lam_d = meta.steps(cfg)
    p0 = normalize_power(task.init.p, cfg.total_power)
    d0 = project_positions(task.init.d, cfg.box)
    p = (np.real(p0).copy(), np.imag(p0).copy())
    d = d0.copy()
    h = channel_pair(cfg, sc, d)
    if kind == "gml-jo":
        hc = compute_channel(cfg, sc, d0)
        aux = auxiliaries_for(hc, p0, cfg.noise_power)
        lin = LinearizationPoint.at(hc, p0)
        gp, gd = _grads_transformed(cfg, sc, (lin, aux, mu))
    else:
        aux = None
        gp, gd = _grads_raw(cfg, sc, mu)
    scale = _InputScale(meta.input_norm)
    for _ in range(meta.n_inner):
        g = _pack(*gp(h, _detach(p, meta.truncate), _detach(d, meta.truncate)))
        delta = bn_forward(bn, scale(g))
        dr, di = _unpack(delta, K, M)
        p = normalize_pair((p[0] + lam_p * dr, p[1] + lam_p * di), cfg.total_power)
    mid = SolutionState(ad.value(p[0]) + 1j * ad.value(p[1]), d0.copy())
    scale = _InputScale(meta.input_norm)
    for _ in range(meta.n_inner):
        if kind == "gml-jo" and meta.refresh_aux:
            hc = compute_channel(cfg, sc, ad.value(d))
            aux = auxiliaries_for(hc, ad.value(p[0]) + 1j * ad.value(p[1]), cfg.noise_power)
            gp, gd = _grads_transformed(cfg, sc, (lin, aux, mu))
        g = gd(_detach(p, meta.truncate), _detach(d, meta.truncate))
        delta = an_forward(an, scale(g))
        d = ad.clip(d + lam_d * delta, cfg.x_min, cfg.x_max)
    h = channel_pair(cfg, sc, d)
    loss = -penalized_wsr_pair(h, p, cfg, 0.0)
    return p, d, loss, mid


def run_subtask(
    cfg: SystemConfig,
    task: SubTask,
    params: MetaNetParams,
    meta: MetaConfig,
    record_tape: bool = False,
    kind: str = "gml-jo",
    mu: Optional[float] = None,
) -> SubTaskResult:
    """Unroll one sub-task. ``kind`` selects the gradient inputs ('gml-jo' or 'gml').

    With ``record_tape`` the network weights are tape leaves and the result
    carries the tape, the loss node and the leaves for backpropagation.
    """
    if kind not in ("gml-jo", "gml"):
        raise InvalidParameterError(f"unknown sub-task kind {kind!r}")
    if (params.K, params.M) != (cfg.K, cfg.M):
        raise ShapeError(f"networks built for K={params.K}, M={params.M}, system has K={cfg.K}, M={cfg.M}")
    mu = meta.pen.mu if mu is None else mu
    tape = None
    bn, an = params.bn, params.an
    if record_tape:
        tape = ad.Tape()
        bn = [tape.var(a) for a in bn]
        an = [tape.var(a) for a in an]
    p, d, loss, mid = _unroll(cfg, task, bn, an, meta, kind, mu)
    pc = ad.value(p[0]) + 1j * ad.value(p[1])
    state = SolutionState(pc, np.array(ad.value(d), dtype=float))
    lval = float(ad.value(loss))
    if record_tape:
        return SubTaskResult(state, lval, -lval, tape, loss, (bn, an), mid)
    return SubTaskResult(state, lval, -lval, mid=mid)


def meta_gradient(cfg: SystemConfig, tasks: Sequence[SubTask], params: MetaNetParams, meta: MetaConfig, kind: str = "gml-jo", mu: Optional[float] = None):
    """Mean loss over ``tasks`` and its gradient in every BN and AN weight.

    Sub-tasks are reduced in index order so the sum is deterministic.
    """
    n = len(tasks)
    gbn = [np.zeros_like(a) for a in params.bn]
    gan = [np.zeros_like(a) for a in params.an]
    results = []
    total = 0.0
    for task in tasks:
        res = run_subtask(cfg, task, params, meta, record_tape=True, kind=kind, mu=mu)
        adj = res.tape.backward(res.loss_var)
        bn, an = res.leaves
        for k, v in enumerate(bn):
            gbn[k] += adj[v] / n
        for k, v in enumerate(an):
            gan[k] += adj[v] / n
        total += res.loss
        res.tape = res.loss_var = res.leaves = None
        results.append(res)
    return total / n, gbn, gan, results


def mean_loss(cfg, tasks, params, meta, kind="gml-jo", mu=None) -> float:
    return float(np.mean([run_subtask(cfg, t, params, meta, kind=kind, mu=mu).loss for t in tasks]))


# -- outer loops -------------------------------------------------------------


def _as_tasks(scenarios, init) -> list:
    out = []
    for s in scenarios:
        if isinstance(s, SubTask):
            out.append(SubTask(s.scenario, init if init is not None else s.init))
        else:
            if init is None:
                raise InvalidParameterError("an initial state is needed for bare scenarios")
            out.append(SubTask(s, init))
    if not out:
        raise InvalidParameterError("at least one sub-task is required")
    return out


def _wsr(cfg, sc, st):
    h = compute_channel(cfg, sc, st.d)
    _, _, sinr = compute_sinr(h, st.p, cfg.noise_power)
    return float(np.sum(cfg.weights * np.log2(1.0 + sinr)))


def _meta_loop(cfg, scenarios, init, meta: MetaConfig, params, kind) -> MetaResult:
    tasks = _as_tasks(scenarios, init)
    if params is None:
        params = MetaNetParams.init(cfg.K, cfg.M, seed=meta.seed, lr_p=meta.lr_p, lr_d=meta.lr_d)
    else:
        params = params.copy()
    traj = Trajectory()
    t0 = time.perf_counter()
    best = -np.inf
    losses = []
    n_j = meta.n_tasks
    for k in range(meta.n_epochs):
        idx = [(k * n_j + j) % len(tasks) for j in range(n_j)]
        batch = [tasks[i] for i in idx]
        mu = meta.pen.mu_at(k)
        L, gbn, gan, results = meta_gradient(cfg, batch, params, meta, kind=kind, mu=mu)
        for task, res in zip(batch, results):
            cands = [(res.wsr, res.state)]
            if meta.track_mid:
                cands.append((_wsr(cfg, task.scenario, res.mid), res.mid))
            for w, st in cands:
                if w > best:
                    best = w
                    traj.best = st.copy()
                    traj.best_wsr = best
        last = results[-1].state
        h = compute_channel(cfg, batch[-1].scenario, last.d)
        _, _, sinr = compute_sinr(h, last.p, cfg.noise_power)
        traj.records.append(
            IterRecord(
                iter=k + 1,
                wsr=float(-L),
                best_wsr=float(best),
                objective=float(L),
                power_slack=cfg.total_power - total_power(last.p),
                min_qos_slack=float(np.min(sinr - cfg.sinr_min)),
                box_violation=float(max(np.max(cfg.x_min - last.d), np.max(last.d - cfg.x_max), 0.0)),
                wall_time=time.perf_counter() - t0,
                power_budget=cfg.total_power,
            )
        )
        losses.append(L)
        if meta.warm_start:
            for i, res in zip(idx, results):
                tasks[i] = SubTask(tasks[i].scenario, res.state.copy())
        params.bn, params.bn_adam = adam_step(params.bn, gbn, params.bn_adam)
        params.an, params.an_adam = adam_step(params.an, gan, params.an_adam)
    traj.final = results[-1].state.copy()
    return MetaResult(traj.best.p, traj.best.d, traj, params, losses)


def gml_jo(
    cfg: SystemConfig,
    scenarios: Sequence,
    init: Optional[SolutionState] = None,
    meta: MetaConfig = MetaConfig(),
    params: Optional[MetaNetParams] = None,
) -> MetaResult:
    """Meta-learned joint optimisation on the transformed problem.

    ``scenarios`` are :class:`Scenario` or :class:`SubTask` objects; epoch
    ``k`` uses ``n_tasks`` of them taken cyclically. The returned solution is
    the best sub-task completion seen over all epochs.
    """
    return _meta_loop(cfg, scenarios, init, meta, params, "gml-jo")


def gml_baseline(
    cfg: SystemConfig,
    scenarios: Sequence,
    init: Optional[SolutionState] = None,
    meta: MetaConfig = MetaConfig(),
    params: Optional[MetaNetParams] = None,
) -> MetaResult:
    """Same loop as :func:`gml_jo` with raw penalised-WSR gradients as inputs."""
    return _meta_loop(cfg, scenarios, init, meta, params, "gml")


def solve_with_params(cfg: SystemConfig, sc: Scenario, init: SolutionState, params: MetaNetParams, meta: MetaConfig, kind: str = "gml-jo") -> SolutionState:
    """Inference only: one unrolled pass with trained networks, no tape."""
    return run_subtask(cfg, SubTask(sc, init), params, meta, kind=kind).state
