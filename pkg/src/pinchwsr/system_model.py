"""Channel, SINR and rate evaluation for a multi-waveguide pinching-antenna downlink.

Conventions used throughout the package:

* ``h`` and ``p`` are complex ``(K, M)`` arrays; column ``m`` of ``h`` is the
  channel vector of user ``m`` and column ``m`` of ``p`` its beamformer.
* ``A = h^H p`` is the ``(M, M)`` matrix of effective gains, ``A[m, n] = h_m^H p_n``.
* ``d`` is the length-``K`` vector of antenna x-coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateGeometryError,
    InvalidParameterError,
    NormalizationError,
    ShapeError,
)

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


def guided_wavelength(wavelength: float, n_eff: float) -> float:
    """Wavelength inside a waveguide of effective refractive index ``n_eff``."""
    if not wavelength > 0:
        raise InvalidParameterError(f"wavelength must be positive, got {wavelength}")
    if not n_eff >= 1:
        raise InvalidParameterError(f"effective index must be >= 1, got {n_eff}")
    return wavelength / n_eff


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SystemConfig:
    num_waveguides: int
    num_users: int
    carrier_wavelength: float
    guided_wavelength: float
    attenuation: float
    noise_power: float
    total_power: float
    weights: np.ndarray
    sinr_min: np.ndarray
    x_min: float
    x_max: float
    waveguide_height: float
    region_side: float

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "sinr_min", _frozen(self.sinr_min))
        self.validate()

    def validate(self):
        K, M = self.num_waveguides, self.num_users
        if int(K) != K or K < 1:
            raise InvalidParameterError("num_waveguides must be a positive integer")
        if int(M) != M or M < 1:
            raise InvalidParameterError("num_users must be a positive integer")
        for name in ("carrier_wavelength", "guided_wavelength", "attenuation",
                     "noise_power", "total_power", "region_side"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if not self.x_min < self.x_max:
            raise InvalidParameterError("position box needs x_min < x_max")
        if self.weights.shape != (M,) or self.sinr_min.shape != (M,):
            raise InvalidParameterError("weights and sinr_min need one entry per user")
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise InvalidParameterError("weights must lie in [0, 1]")
        if np.any(self.sinr_min < 0):
            raise InvalidParameterError("sinr_min must be non-negative")

    @property
    def K(self) -> int:
        return int(self.num_waveguides)

    @property
    def M(self) -> int:
        return int(self.num_users)

    @property
    def box(self) -> tuple[float, float]:
        return self.x_min, self.x_max

    @classmethod
    def build(
        cls,
        num_waveguides: int = 2,
        num_users: int = 2,
        power_dbm: float = 60.0,
        noise_dbm: float = -40.0,
        carrier_hz: float = 28e9,
        n_eff: float = 1.4,
        region_side: float = 20.0,
        waveguide_height: float = 3.0,
        weights: Optional[Sequence[float]] = None,
        sinr_min: Optional[Sequence[float]] = None,
        attenuation: Optional[float] = None,
        position_box: Optional[tuple[float, float]] = None,
    ) -> "SystemConfig":
        """Config from physical units (dBm, Hz, metres).

        The attenuation defaults to the free-space constant
        ``lambda^2 / (16 pi^2)``.
        """
        lam = SPEED_OF_LIGHT / carrier_hz
        M = int(num_users)
        box = position_box if position_box is not None else (0.0, region_side)
        return cls(
            num_waveguides=int(num_waveguides),
            num_users=M,
            carrier_wavelength=lam,
            guided_wavelength=guided_wavelength(lam, n_eff),
            attenuation=attenuation if attenuation is not None else lam**2 / (16 * math.pi**2),
            noise_power=float(dbm_to_watt(noise_dbm)),
            total_power=float(dbm_to_watt(power_dbm)),
            weights=np.ones(M) if weights is None else weights,
            sinr_min=np.ones(M) if sinr_min is None else sinr_min,
            x_min=float(box[0]),
            x_max=float(box[1]),
            waveguide_height=float(waveguide_height),
            region_side=float(region_side),
        )

    def replace(self, **changes) -> "SystemConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        return cls(**data)


@dataclass(frozen=True)
class Scenario:
    """User layout and waveguide geometry for one problem instance."""

    user_positions: np.ndarray
    waveguide_y: np.ndarray
    feed_positions: np.ndarray

    def __post_init__(self):
        for name in ("user_positions", "waveguide_y", "feed_positions"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.user_positions.ndim != 2 or self.user_positions.shape[1] != 3:
            raise ShapeError("user_positions must be (M, 3)")
        if self.feed_positions.shape != (self.waveguide_y.shape[0], 3):
            raise ShapeError("feed_positions must be (K, 3)")
        if np.any(np.diff(self.waveguide_y) <= 0):
            raise InvalidParameterError("waveguide_y must be strictly increasing")

    @property
    def K(self) -> int:
        return self.waveguide_y.shape[0]

    @property
    def M(self) -> int:
        return self.user_positions.shape[0]

    @property
    def feed_x(self) -> np.ndarray:
        return self.feed_positions[:, 0]

    @classmethod
    def from_users(cls, cfg: SystemConfig, users_xy) -> "Scenario":
        """Users at ``z = 0`` with waveguides equally spaced across the region."""
        users_xy = np.atleast_2d(np.asarray(users_xy, dtype=float))
        users = np.column_stack([users_xy, np.zeros(users_xy.shape[0])])
        wy = equal_spacing(cfg.region_side, cfg.K)
        feeds = np.column_stack([np.full(cfg.K, cfg.x_min), wy, np.full(cfg.K, cfg.waveguide_height)])
        return cls(users, wy, feeds)

    def to_dict(self) -> dict:
        return {
            "user_positions": self.user_positions.tolist(),
            "waveguide_y": self.waveguide_y.tolist(),
            "feed_positions": self.feed_positions.tolist(),
        }


def equal_spacing(length: float, n: int) -> np.ndarray:
    """Centres of ``n`` equal cells tiling ``[0, length]``."""
    return (np.arange(n) + 0.5) * (length / n)


@dataclass
class SolutionState:
    p: np.ndarray
    d: np.ndarray
    gamma: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None

    def copy(self) -> "SolutionState":
        cp = lambda a: None if a is None else np.array(a, copy=True)
        return SolutionState(cp(self.p), cp(self.d), cp(self.gamma), cp(self.y))


def antenna_positions(cfg: SystemConfig, sc: Scenario, d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return np.column_stack([d, sc.waveguide_y, np.full(d.shape[0], cfg.waveguide_height)])


def _check_dims(cfg: SystemConfig, sc: Scenario, d):
    if sc.K != cfg.K or sc.M != cfg.M:
        raise ShapeError(f"scenario is {sc.K}x{sc.M}, config is {cfg.K}x{cfg.M}")
    if np.shape(d) != (cfg.K,):
        raise ShapeError(f"expected {cfg.K} antenna positions, got shape {np.shape(d)}")


def distances(cfg: SystemConfig, sc: Scenario, d) -> tuple[np.ndarray, np.ndarray]:
    """Free-space distances ``(K, M)`` and in-waveguide run lengths ``(K,)``."""
    ant = antenna_positions(cfg, sc, d)
    diff = ant[:, None, :] - sc.user_positions[None, :, :]
    free = np.sqrt(np.sum(diff * diff, axis=-1))
    guide = np.abs(np.asarray(d, dtype=float) - sc.feed_x)
    return free, guide


def compute_channel(cfg: SystemConfig, sc: Scenario, d) -> np.ndarray:
    """Complex gains ``h[k, m]`` between antenna ``k`` and user ``m``."""
    _check_dims(cfg, sc, d)
    free, guide = distances(cfg, sc, d)
    if np.any(free <= 0):
        raise DegenerateGeometryError("a user coincides with an antenna")
    phase = 2.0 * np.pi * (free / cfg.carrier_wavelength + guide[:, None] / cfg.guided_wavelength)
    return math.sqrt(cfg.attenuation) * np.exp(-1j * phase) / free


def channel_pair(cfg: SystemConfig, sc: Scenario, d, eps: float = ad.ABS_EPS):
    """Channel as an ``(re, im)`` pair; ``d`` may be a tape variable.

    The distance is smoothed as ``sqrt(r^2 + eps^2)`` so gradients stay
    finite at coincident points.
    """
    users = sc.user_positions
    dx = ad.reshape(d, (cfg.K, 1)) - users[None, :, 0]
    rest = (sc.waveguide_y[:, None] - users[None, :, 1]) ** 2 + (cfg.waveguide_height - users[None, :, 2]) ** 2
    r = ad.sqrt(ad.square(dx) + rest + eps * eps)
    guide = ad.abs_(d - sc.feed_x)
    phase = 2.0 * np.pi * (r / cfg.carrier_wavelength + ad.reshape(guide, (cfg.K, 1)) / cfg.guided_wavelength)
    amp = math.sqrt(cfg.attenuation) / r
    return amp * ad.cos(phase), ad.neg(amp * ad.sin(phase))


def channel_derivative(cfg: SystemConfig, sc: Scenario, d, eps: float = ad.ABS_EPS):
    """``dh[k, m] / dd_k`` in closed form, as an ``(re, im)`` pair (tape-compatible)."""
    hr, hi = channel_pair(cfg, sc, d, eps)
    users = sc.user_positions
    dx = ad.reshape(d, (cfg.K, 1)) - users[None, :, 0]
    rest = (sc.waveguide_y[:, None] - users[None, :, 1]) ** 2 + (cfg.waveguide_height - users[None, :, 2]) ** 2
    r = ad.sqrt(ad.square(dx) + rest + eps * eps)
    dr = dx / r
    g = d - sc.feed_x
    sgn = ad.reshape(g / ad.sqrt(ad.square(g) + eps * eps), (cfg.K, 1))
    # h' = h * (-2 pi j (dr/lam + sgn/lam_g) - dr / r)
    w = 2.0 * np.pi * (dr / cfg.carrier_wavelength + sgn / cfg.guided_wavelength)
    a = ad.neg(dr / r)
    return hr * a + hi * w, hi * a - hr * w


def gain_matrix(h, p) -> np.ndarray:
    """``A[m, n] = h_m^H p_n``."""
    return np.conj(h).T @ p


def compute_sinr(h, p, noise_power: float):
    """Per-user signal power, interference power and SINR."""
    h = np.asarray(h)
    p = np.asarray(p)
    if h.ndim != 2 or h.shape != p.shape:
        raise ShapeError(f"channel {h.shape} and beamformer {p.shape} disagree")
    if not noise_power > 0:
        raise InvalidParameterError("noise power must be positive")
    a2 = np.abs(gain_matrix(h, p)) ** 2
    G = np.diag(a2).copy()
    I = a2.sum(axis=1) - G
    return G, I, G / (I + noise_power)


def compute_wsr(h, p, cfg: SystemConfig) -> float:
    _, _, sinr = compute_sinr(h, p, cfg.noise_power)
    return float(np.sum(cfg.weights * np.log2(1.0 + sinr)))


def total_power(p) -> float:
    return float(np.sum(np.abs(p) ** 2))


def normalize_power(p, p_total: float) -> np.ndarray:
    """Rescale ``p`` so that the summed beam power equals ``p_total``."""
    p = np.asarray(p)
    pw = total_power(p)
    if not pw > 0:
        raise NormalizationError("cannot normalize an all-zero beamformer")
    return p * math.sqrt(p_total / pw)


def normalize_pair(p, p_total: float):
    pr, pi = p
    scale = ad.sqrt(p_total / (ad.sum_(ad.square(pr)) + ad.sum_(ad.square(pi))))
    return pr * scale, pi * scale


def project_positions(d, box) -> np.ndarray:
    """Clamp every coordinate into ``[x_min, x_max]``."""
    lo, hi = box
    return np.clip(np.asarray(d, dtype=float), lo, hi)


@dataclass
class FeasibilityReport:
    power_ok: bool
    position_ok: bool
    qos_ok: bool
    violations: dict = field(default_factory=dict)

    @property
    def all_ok(self) -> bool:
        return self.power_ok and self.position_ok and self.qos_ok


def check_feasibility(h, p, d, cfg: SystemConfig, power_rtol: float = 1e-9) -> FeasibilityReport:
    """Evaluate the power, position and QoS constraints. Never raises on infeasibility."""
    power_slack = cfg.total_power - total_power(p)
    d = np.asarray(d, dtype=float)
    pos_slack = np.minimum(d - cfg.x_min, cfg.x_max - d)
    _, _, sinr = compute_sinr(h, p, cfg.noise_power)
    qos_slack = sinr - cfg.sinr_min
    return FeasibilityReport(
        power_ok=bool(power_slack >= -power_rtol * cfg.total_power),
        position_ok=bool(np.all(pos_slack >= 0)),
        qos_ok=bool(np.all(qos_slack >= 0)),
        violations={
            "power_slack": float(power_slack),
            "position_slack": pos_slack,
            "qos_slack": qos_slack,
        },
    )


# -- complex <-> stacked-real packing ---------------------------------------


def pack_complex(z) -> np.ndarray:
    """``[Re(vec z); Im(vec z)]`` with columns stacked (``p_1`` first)."""
    z = np.asarray(z)
    return np.concatenate([z.real.ravel(order="F"), z.imag.ravel(order="F")])


def unpack_complex(v, K: int, M: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = K * M
    if v.shape != (2 * n,):
        raise ShapeError(f"expected {2 * n} reals, got {v.shape}")
    return v[:n].reshape((K, M), order="F") + 1j * v[n:].reshape((K, M), order="F")


def pack_pair(pr, pi):
    """Tape-compatible :func:`pack_complex` for an ``(re, im)`` pair."""
    K, M = ad.value(pr).shape
    return ad.concatenate([ad.reshape(ad.transpose(pr), (K * M,)), ad.reshape(ad.transpose(pi), (K * M,))])


def unpack_pair(v, K: int, M: int):
    n = K * M
    re = ad.transpose(ad.reshape(v[:n], (M, K)))
    im = ad.transpose(ad.reshape(v[n:], (M, K)))
    return re, im
