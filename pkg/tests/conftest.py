import numpy as np
import pytest

from pinchwsr.harness import sample_scenario
from pinchwsr.system_model import Scenario, SystemConfig


def unit_config(K=1, M=1, eta=1.0, lam=2.0, lam_g=2.0, **kw):
    """Hand-built config with round-number constants for closed-form checks."""
    base = dict(
        num_waveguides=K, num_users=M, carrier_wavelength=lam, guided_wavelength=lam_g,
        attenuation=eta, noise_power=1.0, total_power=1.0, weights=np.ones(M), sinr_min=np.zeros(M),
        x_min=0.0, x_max=10.0, waveguide_height=1.0, region_side=10.0,
    )
    base.update(kw)
    return SystemConfig(**base)


def single_point_scenario(user=(0.0, 0.0), wg_y=0.0, feed_x=0.0, height=1.0):
    return Scenario(np.array([[user[0], user[1], 0.0]]), np.array([wg_y]), np.array([[feed_x, wg_y, height]]))


def random_instance(rng, K=2, M=2, **kw):
    cfg = SystemConfig.build(K, M, **kw)
    sc = sample_scenario(cfg, rng)
    d = rng.uniform(cfg.x_min, cfg.x_max, K)
    p = rng.standard_normal((K, M)) + 1j * rng.standard_normal((K, M))
    return cfg, sc, d, p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, step):
    """Plain central differences, kept separate from the package's own checker."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


# Every iterate recorded by any solver during any test must satisfy the power
# and box constraints; a violation fails the test that produced it.
from pinchwsr import meta as _meta
from pinchwsr import solvers as _solvers

AUDIT = {"records": 0, "bad": []}


class _AuditedRecord(_solvers.IterRecord):
    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        AUDIT["records"] += 1
        if not self.feasible():
            AUDIT["bad"].append(self)


@pytest.fixture(autouse=True)
def constraint_audit(monkeypatch):
    monkeypatch.setattr(_solvers, "IterRecord", _AuditedRecord)
    monkeypatch.setattr(_meta, "IterRecord", _AuditedRecord)
    start = len(AUDIT["bad"])
    yield AUDIT
    bad = AUDIT["bad"][start:]
    assert not bad, f"{len(bad)} recorded iterates violate the constraints, first: {bad[0]}"


# Measured values that acceptance tests report but do not assert.
REPORT: dict = {}


def pytest_terminal_summary(terminalreporter):
    terminalreporter.section("constraint audit")
    terminalreporter.write_line(f"recorded iterates checked: {AUDIT['records']}, violations: {len(AUDIT['bad'])}")
    if REPORT:
        terminalreporter.section("acceptance measurements")
        for name in sorted(REPORT):
            terminalreporter.write_line(f"{name}: {REPORT[name]}")
