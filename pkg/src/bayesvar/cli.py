"""``bayesvar`` command line: ``verify`` and ``experiment NAME``.

Exit codes: 0 when every check passes, 1 when any check fails, 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import EXPERIMENTS, OUT_ENV, ConfigError, cmd_experiment, cmd_verify, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("bayesvar")


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesvar", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file, or a report.json from an earlier run")
    common.add_argument("--seed", type=_u64, metavar="U64", help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV} or ./bayesvar-runs)")
    common.add_argument("-q", "--quiet", action="store_true", help="print only the summary line")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run the full identity suite")
    exp = sub.add_parser("experiment", parents=[common], help="run one named experiment")
    exp.add_argument("name", metavar="NAME", help=f"one of: {', '.join(EXPERIMENTS)}")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    name = "verify" if args.command == "verify" else args.name
    try:
        config = load_config(args.config, name=name, seed=args.seed, out=args.out)
    except ConfigError as exc:
        log.error("bayesvar: error: %s", exc)
        return EXIT_USAGE

    report = cmd_verify(config) if name == "verify" else cmd_experiment(config)
    paths = report.write(config.output_dir())
    if not args.quiet:
        for c in report.checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.value:.3e} {c.relation} {c.threshold:.3e}")
    failed = report.failures
    print(f"{name}: {len(report.checks) - len(failed)}/{len(report.checks)} checks passed "
          f"in {report.wall_clock:.1f}s; report at {paths[0]}")
    if failed:
        print("failed: " + ", ".join(c.name for c in failed))
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
