"""Command-line entry point: ``pinchwsr {run,sweep,check,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import PinchError

log = logging.getLogger("pinchwsr")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from e

    return parse


def _summarise(rows):
    from .harness import _final_rows

    for r in sorted(_final_rows(rows), key=lambda r: (r["algorithm"], r["K"], r["M"], r["power_dBm"], r["region_side"], r["seed"])):
        print(f"{r['algorithm']:>14} K={r['K']} M={r['M']} P={r['power_dBm']:g}dBm S={r['region_side']:g}m "
              f"seed={r['seed']} best_wsr={r['best_wsr']:.4f} time={r['wall_time_ms']:.0f}ms")


def cmd_run(args):
    from .harness import ExperimentSpec, run_experiment

    spec = ExperimentSpec.from_json(args.spec)
    if args.seed is not None:
        spec.master_seed = args.seed
    if args.out:
        spec.out_dir = args.out
    rows = run_experiment(spec)
    _summarise(rows)
    print(f"results in {Path(spec.out_dir) / 'results.csv'}")
    return 0


def cmd_sweep(args):
    from .harness import ExperimentSpec, run_experiment

    spec = ExperimentSpec(
        algorithm=args.algo,
        K=args.k,
        M=args.m,
        power_dbm=args.power_dbm,
        region_side=args.region,
        seeds=list(range(args.seeds)),
        iters=args.iters,
        out_dir=args.out,
        master_seed=args.seed or 0,
    )
    rows = run_experiment(spec)
    _summarise(rows)
    print(f"results in {Path(spec.out_dir) / 'results.csv'}")
    return 0


def cmd_check(args):
    from .checks import run_all

    results = run_all(seed=args.seed or 0, quick=args.quick)
    failed = 0
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<30} {r.detail}  ({r.seconds:.1f}s)")
        failed += not r.ok
    return 1 if failed else 0


def cmd_plot(args):
    from .harness import emit_plots, read_results

    rows = read_results(args.input)
    for path in emit_plots(rows, args.kind, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .harness import ALGORITHMS, PLOT_KINDS, WORKERS_ENV

    ap = argparse.ArgumentParser(
        prog="pinchwsr",
        description="Weighted-sum-rate optimisation for pinching-antenna systems.",
        epilog=f"Set {WORKERS_ENV}=N to run sweep cells on N worker processes.",
    )
    ap.add_argument("--seed", type=int, default=None, help="master seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment spec (JSON)")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", default=None, help="override the spec's output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one algorithm over a grid of settings")
    p.add_argument("--algo", required=True, choices=ALGORITHMS)
    p.add_argument("--k", type=_csv_list(int), default=[2], help="comma-separated waveguide counts")
    p.add_argument("--m", type=_csv_list(int), default=[2], help="comma-separated user counts")
    p.add_argument("--power-dbm", type=_csv_list(float), default=[60.0])
    p.add_argument("--region", type=_csv_list(float), default=[20.0], help="comma-separated region sides in metres")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..n-1)")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="run transform, gradient and oracle self-checks")
    p.add_argument("--quick", action="store_true", help="fewer random points")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("plot", help="plot a results CSV")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PinchError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
