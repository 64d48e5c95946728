"""scikit-learn style wrappers around the solvers.

``X`` is always an ``(M, 2)`` array of user coordinates in metres (or, for
the meta-learned solvers, a list of such arrays used as training channels).
``fit`` solves the problem, ``predict`` returns antenna positions and
``score`` the achieved WSR.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvalidParameterError, ShapeError
from .harness import ALGORITHMS, make_config
from .meta import MetaConfig, gml_baseline, gml_jo, solve_with_params
from .solvers import SolveOptions, initial_state, solve_ao_baseline, solve_et_ca, solve_exhaustive, solve_gd, solve_transformed_ao, solve_udb
from .system_model import Scenario, SolutionState, SystemConfig, compute_channel, compute_wsr


def check_users(X, region_side: float | None = None, n_users: int | None = None) -> np.ndarray:
    """Validate a user-coordinate array: finite, 2-D with two columns, inside the region."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 2:
        raise ShapeError(f"user coordinates need 2 columns, got {X.shape[1]}")
    if n_users is not None and X.shape[0] != n_users:
        raise ShapeError(f"expected {n_users} users, got {X.shape[0]}")
    if region_side is not None and (np.any(X < 0) or np.any(X > region_side)):
        raise InvalidParameterError(f"user coordinates must lie in [0, {region_side}]")
    return X


def check_beamformer(p, K: int, M: int) -> np.ndarray:
    p = np.asarray(p)
    if p.shape != (K, M):
        raise ShapeError(f"beamformer must be ({K}, {M}), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError("beamformer has non-finite entries")
    return p.astype(complex)


def check_positions(d, cfg: SystemConfig) -> np.ndarray:
    d = check_array(np.atleast_1d(d), ensure_2d=False, dtype=np.float64)
    if d.shape != (cfg.K,):
        raise ShapeError(f"positions must have length {cfg.K}, got {d.shape}")
    return d


def _user_sets(X):
    if isinstance(X, (list, tuple)) and len(X) and np.ndim(X[0]) == 2:
        return [np.asarray(x) for x in X]
    return [X]


class PinchingWSRSolver(BaseEstimator):
    """Joint beamforming and antenna placement for one of the supported algorithms.

    Parameters mirror the system defaults: ``power_dbm`` total transmit power,
    ``noise_dbm`` noise power, ``region_side`` the square side in metres.
    ``n_iter`` is outer iterations for the iterative solvers and epochs for
    the meta-learned ones.
    """

    def __init__(
        self,
        algorithm: str = "transformed-ao",
        num_waveguides: int = 2,
        power_dbm: float = 60.0,
        noise_dbm: float = -40.0,
        region_side: float = 20.0,
        n_iter: int = 100,
        seed: int = 0,
    ):
        self.algorithm = algorithm
        self.num_waveguides = num_waveguides
        self.power_dbm = power_dbm
        self.noise_dbm = noise_dbm
        self.region_side = region_side
        self.n_iter = n_iter
        self.seed = seed

    def _config(self, M) -> SystemConfig:
        return make_config(self.num_waveguides, M, self.power_dbm, self.region_side, noise_dbm=self.noise_dbm)

    def _validate_params(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidParameterError(f"unknown algorithm {self.algorithm!r}")
        if int(self.n_iter) < 1:
            raise InvalidParameterError("n_iter must be >= 1")

    def fit(self, X, y=None):
        """Solve for the users in ``X``.

        For 'gml-jo' and 'gml' a list of user arrays trains the networks
        across channels; the solution stored is that of the first array.
        """
        self._validate_params()
        sets = [check_users(x, self.region_side) for x in _user_sets(X)]
        M = sets[0].shape[0]
        if any(s.shape[0] != M for s in sets):
            raise ShapeError("all training layouts need the same number of users")
        cfg = self._config(M)
        scs = [Scenario.from_users(cfg, s) for s in sets]
        sc = scs[0]
        init = initial_state(cfg, sc)
        opts = SolveOptions(max_outer_iters=int(self.n_iter), seed=self.seed)
        self.meta_params_ = None
        self.trajectory_ = None
        algo = self.algorithm
        if algo in ("gml-jo", "gml"):
            fn = gml_jo if algo == "gml-jo" else gml_baseline
            meta = MetaConfig(n_epochs=int(self.n_iter), n_tasks=len(scs), seed=self.seed)
            res = fn(cfg, scs, init, meta)
            state = res.trajectory.best
            self.meta_params_ = res.params
            self.meta_config_ = meta
            self.trajectory_ = res.trajectory
        elif algo == "udb":
            state = solve_udb(cfg, sc, seed=self.seed)
        elif algo == "exhaustive":
            state = solve_exhaustive(cfg, sc, opts=opts)
        else:
            fn = {"ao": solve_ao_baseline, "transformed-ao": solve_transformed_ao, "gd": solve_gd, "et-ca": solve_et_ca}[algo]
            start = initial_state(cfg, sc, power_fraction=0.9) if algo == "et-ca" else init
            tr = fn(cfg, sc, start, opts)
            state = tr.best
            self.trajectory_ = tr
        self.config_ = cfg
        self.scenario_ = sc
        self.beamformer_ = state.p
        self.positions_ = state.d
        self.wsr_ = compute_wsr(compute_channel(cfg, sc, state.d), state.p, cfg)
        self.n_features_in_ = 2
        return self

    def predict(self, X=None):
        """Antenna positions. For meta-learned solvers a new ``X`` is solved
        with the trained networks (inference only)."""
        check_is_fitted(self, "positions_")
        if X is None:
            return self.positions_.copy()
        return self._solve_new(X).d

    def score(self, X=None, y=None) -> float:
        """Achieved weighted sum rate in bit/s/Hz."""
        check_is_fitted(self, "positions_")
        if X is None:
            return float(self.wsr_)
        X = check_users(X, self.region_side, self.config_.M)
        sc = Scenario.from_users(self.config_, X)
        st = self._solve_new(X)
        return compute_wsr(compute_channel(self.config_, sc, st.d), st.p, self.config_)

    def _solve_new(self, X):
        X = check_users(X, self.region_side, self.config_.M)
        cfg = self.config_
        sc = Scenario.from_users(cfg, X)
        if self.meta_params_ is not None:
            kind = "gml-jo" if self.algorithm == "gml-jo" else "gml"
            return solve_with_params(cfg, sc, initial_state(cfg, sc), self.meta_params_, self.meta_config_, kind)
        clone = type(self)(**self.get_params()).fit(X)
        return SolutionState(clone.beamformer_, clone.positions_)
