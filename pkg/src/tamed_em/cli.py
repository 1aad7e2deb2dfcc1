"""Command-line front end.

Exit codes: 0 all checks passed, 1 a check failed, 2 usage or config
error, 3 runtime error (divergence, I/O).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .integrator import DivergenceError, set_threads
from .sde_model import InvalidInputError
from .step_schedule import ScheduleError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

_RUNNERS = {
    "converge": harness.run_convergence,
    "moments": harness.run_moment_experiment,
    "validate-schedule": harness.run_schedule_check,
    "check-assumptions": harness.run_assumption_check,
    "probe-lemmas": harness.run_lemma_probes,
    "one-step": harness.run_one_step_probe,
    "bel-check": harness.run_bel_check,
}
SUBCOMMANDS = ("simulate",) + tuple(_RUNNERS)


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = argparse.ArgumentParser(
        prog="tamed-em",
        description="Tamed Euler-Maruyama with decreasing steps: simulation and convergence checks.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "simulate": "run the variable-step ensemble and dump checkpoint samples",
        "converge": "W1/TV convergence against a fine reference ensemble",
        "moments": "Lyapunov moment series and its decay fit",
        "validate-schedule": "check monotonicity, vanishing, divergent sum and theta",
        "check-assumptions": "probe the drift and diffusion conditions",
        "probe-lemmas": "ratio stability of the step sums and the Gaussian tail constant",
        "one-step": "one-step error order of the frozen-coefficient coupling",
        "bel-check": "Bismut-Elworthy-Li gradient against finite differences",
    }
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", metavar="PATH", help="TOML config (optional for simulate)")
        s.add_argument("--out", metavar="DIR", help="output directory (default $TSDE_OUT or ./out)")
        s.add_argument("--seed", type=_u64, metavar="U64", help="override experiment.master_seed")
        s.add_argument("--threads", type=_positive, metavar="N", help="worker threads (default: all cores)")
        s.add_argument("--format", choices=("json", "csv", "both"), default="both")
        s.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                       help="dotted config overrides, e.g. experiment.m=20000")
    return p


def _out_dir(args):
    return args.out or os.environ.get("TSDE_OUT") or "out"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.config is None and args.command != "simulate":
        parser.print_usage(sys.stderr)
        print(f"tamed-em {args.command}: --config is required", file=sys.stderr)
        return EXIT_USAGE

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.master_seed={args.seed}")
    try:
        config = harness.load_config(args.config, overrides)
    except (harness.ConfigError, ScheduleError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    set_threads(args.threads or os.cpu_count() or 1)
    out = _out_dir(args)

    try:
        if args.command == "simulate":
            report = harness.run_simulation(config, out, args.format)
        elif args.command == "converge":
            report = harness.run_convergence(config, out_dir=out)
        else:
            report = _RUNNERS[args.command](config)
        harness.emit_report(report, out, args.format)
    except harness.AssumptionError as exc:
        for r in exc.reports:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.checked_condition} "
                  f"(worst violation {r.worst_violation:.4g})")
        print(f"{args.command}: FAIL ({exc})")
        return EXIT_FAIL
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ScheduleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    for line in report.summary_lines():
        print(line)
    if args.command == "validate-schedule" and report.schedule_report["first_violation"] is not None:
        print(f"schedule increases at step n={report.schedule_report['first_violation']}")
    print(f"{args.command}: {'PASS' if report.passed else 'FAIL'} (results in {out})")
    return EXIT_OK if report.passed else EXIT_FAIL


def main_entry():
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
