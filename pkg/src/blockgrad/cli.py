"""blockgrad command line: run, sweep, report, gradcheck, selftest."""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from . import harness
from .errors import ConfigError, TrainingAborted

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_REPORT = 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockgrad", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train every seed of one config")
    _common(p)

    p = sub.add_parser("sweep", help="run one config per value of a key")
    _common(p)
    p.add_argument("--axis", required=True, help="config key to vary")
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("report", help="summarize completed run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", help="write report.txt and plot_*.csv here")
    p.add_argument("--threshold", type=float, help="loss level for steps-to-threshold")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model loss")
    p.add_argument("--cases", type=int, default=100, help="random seeds per op")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--dtype", choices=["float32", "float64", "both"], default="both")

    sub.add_parser("selftest", help="oracle-equivalence checks")
    return ap


def _load(args) -> harness.ExperimentConfig:
    overrides = harness.parse_overrides(args.overrides)
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.out:
        overrides["out"] = args.out
    return harness.load_config(args.config, overrides)


def _print_runs(summaries) -> None:
    for s in summaries:
        print(
            f"seed={s['seed']} policy={s['policy']} final_train_loss={s['final_train_loss']:.4f} "
            f"peak_state_scalars={s['peak_state_scalars']} q={s['q_final']:.4f}"
        )


def cmd_run(args) -> int:
    cfg = _load(args)
    _print_runs(harness.run(cfg))
    print(f"wrote {cfg['out']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    results = harness.sweep(cfg, args.axis, args.values.split(","))
    for value, summaries in results.items():
        print(f"[{args.axis}={value}]")
        _print_runs(summaries)
    print(f"wrote {cfg['out']}")
    return EXIT_OK


TOLERANCE = {"float32": 1e-3, "float64": 1e-6}


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, worst_by_op

    dtypes = ["float32", "float64"] if args.dtype == "both" else [args.dtype]
    ok = True
    for dt in dtypes:
        worst = worst_by_op(run_suite(args.cases, dt, args.h))
        tol = TOLERANCE[dt]
        for op, err in sorted(worst.items()):
            flag = "PASS" if err < tol else "FAIL"
            ok &= err < tol
            print(f"{flag} {dt:8s} {op:18s} worst rel err {err:.3e} (tol {tol:g})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK_FAILED


def cmd_report(args) -> int:
    print(harness.report(args.dirs, out=args.out, threshold=args.threshold))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"run aborted: {e}", file=sys.stderr)
        return EXIT_ABORTED
    except harness.ReportError as e:
        print(f"report error: {e}", file=sys.stderr)
        return EXIT_REPORT


if __name__ == "__main__":
    sys.exit(main())
