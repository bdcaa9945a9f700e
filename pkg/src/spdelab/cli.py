"""Command line entry point: run / sweep / validate experiment configs."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config, validate_config
from .evolution import HypothesesUnmet, SolverDivergence


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="spdelab",
        description="Batch runner for the stochastic-parabolic numerical lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", default=None,
                       help="override experiment.output_dir")

    p_sweep = sub.add_parser("sweep", help="run a config over a value ladder")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated ladder, e.g. 1e-2,5e-3")
    p_sweep.add_argument("--output", default=None)

    p_val = sub.add_parser("validate", help="check a config and exit")
    p_val.add_argument("config")

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "validate":
        notes = validate_config(cfg)
        print(f"{args.config}: ok (kind={cfg.kind})")
        for note in notes:
            print(f"  {note}")
        return 0

    from .runner import run_experiment, sweep_experiment, write_json
    from pathlib import Path

    try:
        if args.command == "run":
            report, manifest = run_experiment(cfg, args.output)
            print(f"report written to "
                  f"{args.output or cfg.output_dir}/report.json")
            if report.get("passed") is False:
                print("warning: suite reported failures", file=sys.stderr)
        else:
            values = [v for v in args.values.split(",") if v]
            outdir = Path(args.output or cfg.output_dir)
            outdir.mkdir(parents=True, exist_ok=True)
            report = sweep_experiment(cfg, args.param, values, outdir)
            write_json(outdir / "report.json", report)
            print(f"sweep written to {outdir}/sweep.csv")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except HypothesesUnmet as exc:
        print(f"hypothesis gate refused: {exc}", file=sys.stderr)
        return 2
    except (SolverDivergence, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
