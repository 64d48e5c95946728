"""Seeded experiment sweeps, CSV persistence and figure-style plots.

A spec expands to the Cartesian product of its sweep axes and seeds. Every
cell draws its user layout and initial state from ``(master_seed, seed)``
alone, so different algorithms at the same seed see the same instance and
serial and parallel runs write the same rows.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import InvalidParameterError
from .meta import MetaConfig, gml_baseline, gml_jo
from .solvers import (
    SolveOptions,
    initial_state,
    solve_ao_baseline,
    solve_et_ca,
    solve_exhaustive,
    solve_gd,
    solve_transformed_ao,
    solve_udb,
)
from .system_model import Scenario, SystemConfig, compute_channel, compute_sinr, total_power

ALGORITHMS = ("gml-jo", "gml", "et-ca", "ao", "transformed-ao", "gd", "udb", "exhaustive")
COLUMNS = (
    "algorithm",
    "seed",
    "K",
    "M",
    "power_dBm",
    "region_side",
    "iter",
    "wsr",
    "best_wsr",
    "min_qos_slack",
    "power_slack",
    "wall_time_ms",
)
WORKERS_ENV = "PINCHWSR_WORKERS"
RESULTS_FILE = "results.csv"
DONE_FILE = "cells.done"
META_FILE = "run.json"
POWER_AXIS_NOTE = "power_dBm is total transmit power; noise power is fixed by noise_dbm"
_BUILD_KEYS = {"noise_dbm", "carrier_hz", "n_eff", "waveguide_height", "weights", "sinr_min", "attenuation", "position_box"}


@dataclass
class ExperimentSpec:
    algorithm: str
    K: list = field(default_factory=lambda: [2])
    M: list = field(default_factory=lambda: [2])
    power_dbm: list = field(default_factory=lambda: [60.0])
    region_side: list = field(default_factory=lambda: [20.0])
    seeds: list = field(default_factory=lambda: [0])
    iters: int = 100
    out_dir: str = "results"
    master_seed: int = 0
    overrides: dict = field(default_factory=dict)
    grid_res: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidParameterError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        for name in ("K", "M", "power_dbm", "region_side", "seeds"):
            v = getattr(self, name)
            if not isinstance(v, (list, tuple)) or len(v) == 0:
                raise InvalidParameterError(f"sweep axis {name!r} must be a non-empty list")
        if self.iters < 1:
            raise InvalidParameterError("iters must be >= 1")
        bad = set(self.overrides) - _BUILD_KEYS
        if bad:
            raise InvalidParameterError(f"unknown SystemConfig overrides: {sorted(bad)}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise InvalidParameterError(f"unknown spec keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def cells(self) -> list:
        axes = itertools.product(self.K, self.M, self.power_dbm, self.region_side, self.seeds)
        return [Cell(self.algorithm, int(k), int(m), float(p), float(s), int(sd)) for k, m, p, s, sd in axes]


@dataclass(frozen=True)
class Cell:
    algorithm: str
    K: int
    M: int
    power_dbm: float
    region_side: float
    seed: int

    @property
    def key(self) -> str:
        return f"{self.algorithm}|{self.seed}|{self.K}|{self.M}|{self.power_dbm:g}|{self.region_side:g}"


def make_config(K, M, power_dbm=60.0, region_side=20.0, **overrides) -> SystemConfig:
    return SystemConfig.build(K, M, power_dbm=power_dbm, region_side=region_side, **overrides)


def sample_scenario(cfg: SystemConfig, seed) -> Scenario:
    """Users i.i.d. uniform over the square region, waveguides equally spaced.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if not cfg.region_side > 0:
        raise InvalidParameterError("region_side must be positive")
    rng = np.random.default_rng(seed)
    return Scenario.from_users(cfg, rng.uniform(0.0, cfg.region_side, (cfg.M, 2)))


def cell_streams(master_seed: int, seed: int):
    """Independent generators for the layout and the initial state of a cell."""
    layout, init = np.random.SeedSequence([int(master_seed), int(seed)]).spawn(2)
    return np.random.default_rng(layout), int(init.generate_state(1)[0])


def solve_cell(cfg: SystemConfig, sc: Scenario, algorithm: str, iters: int, init_seed: int, grid_res: float = 0.05):
    """Run one solver on one instance; returns a list of per-iteration dicts."""
    opts = SolveOptions(max_outer_iters=iters, seed=init_seed)
    init = initial_state(cfg, sc)
    if algorithm in ("gml-jo", "gml"):
        fn = gml_jo if algorithm == "gml-jo" else gml_baseline
        res = fn(cfg, [sc], init, MetaConfig(n_epochs=iters, seed=init_seed))
        traj = res.trajectory
    elif algorithm == "et-ca":
        traj = solve_et_ca(cfg, sc, initial_state(cfg, sc, power_fraction=0.9), opts)
    elif algorithm == "ao":
        traj = solve_ao_baseline(cfg, sc, init, opts)
    elif algorithm == "transformed-ao":
        traj = solve_transformed_ao(cfg, sc, init, opts)
    elif algorithm == "gd":
        traj = solve_gd(cfg, sc, init, opts)
    elif algorithm in ("udb", "exhaustive"):
        t0 = time.perf_counter()
        if algorithm == "udb":
            st = solve_udb(cfg, sc, seed=init_seed)
        else:
            st = solve_exhaustive(cfg, sc, grid_res=grid_res, opts=opts)
        h = compute_channel(cfg, sc, st.d)
        _, _, sinr = compute_sinr(h, st.p, cfg.noise_power)
        wsr = float(np.sum(cfg.weights * np.log2(1.0 + sinr)))
        return [dict(iter=0, wsr=wsr, best_wsr=wsr, min_qos_slack=float(np.min(sinr - cfg.sinr_min)),
                     power_slack=cfg.total_power - total_power(st.p), wall_time_ms=1e3 * (time.perf_counter() - t0))]
    else:
        raise InvalidParameterError(f"unknown algorithm {algorithm!r}")
    return [
        dict(iter=r.iter, wsr=r.wsr, best_wsr=r.best_wsr, min_qos_slack=r.min_qos_slack,
             power_slack=r.power_slack, wall_time_ms=1e3 * r.wall_time)
        for r in traj.records
    ]


def run_cell(spec: ExperimentSpec, cell: Cell) -> list:
    cfg = make_config(cell.K, cell.M, cell.power_dbm, cell.region_side, **spec.overrides)
    layout_rng, init_seed = cell_streams(spec.master_seed, cell.seed)
    sc = sample_scenario(cfg, layout_rng)
    rows = solve_cell(cfg, sc, cell.algorithm, spec.iters, init_seed, spec.grid_res)
    head = dict(algorithm=cell.algorithm, seed=cell.seed, K=cell.K, M=cell.M,
                power_dBm=cell.power_dbm, region_side=cell.region_side)
    return [{**head, **r} for r in rows]


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError as e:
        raise InvalidParameterError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from e
    if n < 1:
        raise InvalidParameterError(f"{WORKERS_ENV} must be >= 1")
    return n


def _prepare_out(out: Path):
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise InvalidParameterError(f"output directory {out} is not writable: {e}") from e


def _completed(out: Path) -> set:
    done = out / DONE_FILE
    if not done.exists():
        return set()
    return {line for line in done.read_text().splitlines() if line}


def _drop_partial(csv_path: Path, done: set):
    """Remove rows of cells that never reached the done file (crash leftovers)."""
    if not csv_path.exists():
        return
    rows = read_results(csv_path)
    keep = [r for r in rows if _row_key(r) in done]
    if len(keep) != len(rows):
        _write_rows(csv_path, keep, mode="w")


def _row_key(r) -> str:
    return Cell(r["algorithm"], int(r["K"]), int(r["M"]), float(r["power_dBm"]), float(r["region_side"]), int(r["seed"])).key


def _write_rows(path: Path, rows, mode="a"):
    new = mode == "w" or not path.exists() or path.stat().st_size == 0
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in COLUMNS})
        f.flush()
        os.fsync(f.fileno())


def _run_one(args):
    spec, cell = args
    return run_cell(spec, cell)


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> list:
    """Execute every cell not already recorded and return the full table.

    Rows are appended per cell by this process only; a cell counts as done
    once its key is in ``cells.done``. Worker count comes from ``workers`` or
    the ``PINCHWSR_WORKERS`` environment variable.
    """
    spec.validate()
    out = Path(spec.out_dir)
    _prepare_out(out)
    csv_path = out / RESULTS_FILE
    done = _completed(out)
    _drop_partial(csv_path, done)
    todo = [c for c in spec.cells() if c.key not in done]
    n = worker_count() if workers is None else workers
    _write_sidecar(out, spec)
    if n > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = pool.map(_run_one, [(spec, c) for c in todo])
            for cell, rows in zip(todo, results):
                _commit(out, csv_path, cell, rows)
    else:
        for cell in todo:
            _commit(out, csv_path, cell, run_cell(spec, cell))
    return read_results(csv_path)


def _commit(out, csv_path, cell, rows):
    _write_rows(csv_path, rows)
    with open(out / DONE_FILE, "a", encoding="utf-8") as f:
        f.write(cell.key + "\n")


def _write_sidecar(out: Path, spec: ExperimentSpec):
    meta = {
        "config_hash": spec.config_hash(),
        "spec": spec.to_dict(),
        "master_seed": spec.master_seed,
        "seeds": list(spec.seeds),
        "code_version": __version__,
        "power_axis": POWER_AXIS_NOTE,
        "columns": list(COLUMNS),
    }
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_results(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            for k in ("seed", "K", "M", "iter"):
                r[k] = int(r[k])
            for k in ("power_dBm", "region_side", "wsr", "best_wsr", "min_qos_slack", "power_slack", "wall_time_ms"):
                r[k] = float(r[k])
            out.append(r)
    return out


# -- plots -------------------------------------------------------------------

PLOT_KINDS = ("trace", "power", "region", "runtime")


def _final_rows(rows):
    last = {}
    for r in rows:
        k = _row_key(r)
        if k not in last or r["iter"] >= last[k]["iter"]:
            last[k] = r
    return list(last.values())


def plot_series(rows: Sequence[dict], kind: str) -> dict:
    """Data behind a plot: ``{algorithm: (x, y)}`` computed from table rows only."""
    if kind not in PLOT_KINDS:
        raise InvalidParameterError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    if not rows:
        raise InvalidParameterError("cannot plot an empty results table")
    src = rows if kind == "trace" else _final_rows(rows)
    xkey, ykey = {
        "trace": ("iter", "best_wsr"),
        "power": ("power_dBm", "best_wsr"),
        "region": ("region_side", "best_wsr"),
        "runtime": ("K", "wall_time_ms"),
    }[kind]
    groups: dict = {}
    for r in src:
        groups.setdefault(r["algorithm"], {}).setdefault(r[xkey], []).append(r[ykey])
    series = {}
    for algo in sorted(groups):
        xs = sorted(groups[algo])
        series[algo] = (np.array(xs, dtype=float), np.array([np.mean(groups[algo][x]) for x in xs]))
    return series


def emit_plots(rows, kind: str, out_dir) -> list:
    """Write ``<kind>.png`` plus the plotted series as ``<kind>.json``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(rows, (str, Path)):
        rows = read_results(rows)
    series = plot_series(rows, kind)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = {
        "trace": ("iteration", "best WSR [bit/s/Hz]"),
        "power": ("transmit power [dBm]", "best WSR [bit/s/Hz]"),
        "region": ("region side [m]", "best WSR [bit/s/Hz]"),
        "runtime": ("waveguides K", "wall time [ms]"),
    }[kind]
    fig, ax = plt.subplots(figsize=(6, 4))
    n = len(series)
    for i, (algo, (x, y)) in enumerate(series.items()):
        if kind == "region":
            width = 0.8 / n
            pos = np.arange(x.size) + (i - (n - 1) / 2) * width
            ax.bar(pos, y, width=width, label=algo)
            ax.set_xticks(np.arange(x.size), [f"{v:g}" for v in x])
        else:
            ax.plot(x, y, marker="o" if x.size < 30 else None, label=algo)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    if kind == "runtime":
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    png = out / f"{kind}.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    data = out / f"{kind}.json"
    data.write_text(json.dumps({a: {"x": x.tolist(), "y": y.tolist()} for a, (x, y) in series.items()}, indent=2))
    return [png, data]
