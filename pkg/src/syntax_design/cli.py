"""Command-line entry point: ``syntax-design run`` and ``syntax-design report``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from syntax_design.harness import (
    THREADS_ENV,
    format_table,
    load_spec,
    run_experiment,
    write_report,
)


def _policies(text):
    return [p for p in text.replace(",", " ").split() if p]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syntax-design",
        description="Simulate adaptive subpopulation-selection trials.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write results.csv + summary.json")
    run.add_argument("--config", type=Path, help="YAML experiment config")
    run.add_argument("--policies", type=_policies,
                     help="comma-separated: syntax,conventional,thresholding,synthetic-study,synthetic-design")
    run.add_argument("--horizon", type=int)
    run.add_argument("--runs", type=int, help="runs per environment")
    run.add_argument("--envs", type=int, help="number of environments")
    run.add_argument("--regime", choices=["diminishing", "increasing"])
    run.add_argument("--mismatch", choices=["none", "squared", "fullrank"])
    run.add_argument("--lambda", dest="lam", help="oracle | <float> | sweep")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--out", type=Path, help="output directory")
    run.add_argument("--threads", type=int,
                     help=f"worker processes (default: ${THREADS_ENV} or 1)")
    run.add_argument("-q", "--quiet", action="store_true", help="do not print the result table")

    report = sub.add_parser("report", help="pretty-print a finished experiment")
    report.add_argument("--in", dest="input", type=Path, required=True,
                        help="directory holding summary.json")
    return parser


def _fail(exc: BaseException, code: int = 2) -> int:
    doc = {"error": str(exc), "type": type(exc).__name__}
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            spec = load_spec(
                args.config,
                policies=args.policies,
                horizon=args.horizon,
                runs=args.runs,
                envs=args.envs,
                regime=args.regime,
                mismatch=args.mismatch,
                lam=args.lam,
                seed=args.seed,
                out=args.out,
            )
            report = run_experiment(spec, threads=args.threads)
            csv_path, json_path = write_report(report, spec.output_path)
            if not args.quiet:
                print(format_table(report.summary_dict()))
                print(f"\nwrote {csv_path} and {json_path}")
            return 0
        summary_path = args.input / "summary.json"
        summary = json.loads(summary_path.read_text())
        print(format_table(summary))
        return 0
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable error
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
