"""otafl package entry module."""

import argparse
import json
import logging
import pathlib
import sys
from typing import Any, Dict, List, Optional

import params
from otafl import harness, report
from otafl.design import PolicyKind

logger = logging.getLogger(__name__)

COMMANDS = ("design", "bound", "run", "compare")


def build_parser() -> argparse.ArgumentParser:
    """Create the command-line parser.

    Returns:
        argparse.ArgumentParser: Parser of the design, bound, run and
            compare commands.

    """
    parser = argparse.ArgumentParser(
        prog="otafl",
        description="Biased over-the-air federated learning experiments.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=pathlib.Path, help="JSON or TOML file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("."))
    parser.add_argument("--trace", type=pathlib.Path, help="JSON-lines round trace")
    parser.add_argument(
        "--deployment", type=pathlib.Path, help="deployment JSON to pin"
    )
    parser.add_argument(
        "--design", type=pathlib.Path, help="design JSON of the bound command"
    )
    parser.add_argument(
        "--policy",
        default=PolicyKind.MIN_VARIANCE.value,
        help="policy of the run and bound commands",
    )
    parser.add_argument("--stepsize", type=float)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    return parser


def load_config(args: argparse.Namespace) -> harness.ExperimentConfig:
    """Configuration from the --config file (or the defaults) with the
    command-line overrides applied.
    """
    cfg = (
        harness.ExperimentConfig()
        if args.config is None
        else harness.load_config(args.config)
    )
    cfg = cfg.replace(
        seed=args.seed,
        replicates=args.replicates,
        workers=args.workers,
        trace=None if args.trace is None else str(args.trace),
        deployment_file=None if args.deployment is None else str(args.deployment),
    )
    if args.stepsize is not None:
        stepsizes = dict(cfg.stepsizes)
        stepsizes[PolicyKind.parse(args.policy).value] = args.stepsize
        cfg = cfg.replace(stepsizes=stepsizes)
    return cfg


def main(argv: Optional[List[str]] = None) -> None:
    """Parse the command line and execute one command.

    Args:
        argv (Optional[List[str]]): Arguments without the program name.
            Defaults to sys.argv[1:].

    """
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    cfg = load_config(args)
    setup = harness.prepare_experiment(cfg)
    collect_trace = cfg.trace is not None
    traces = []  # type: List[Dict[str, Any]]
    if args.command == "design":
        report.print_design(report.write_design(setup, args.out), sys.stdout)
    elif args.command == "bound":
        kind = PolicyKind.parse(args.policy)
        if args.design is not None:
            setup.use_design(kind, harness.load_design(args.design, kind))
        bound = harness.evaluate_bound(
            setup,
            kind,
            replicates=0 if args.replicates is None else args.replicates,
        )
        report.write_bound(bound, setup, args.out)
    elif args.command == "run":
        kind = PolicyKind.parse(args.policy)
        stepsize = harness.resolve_stepsize(setup, kind)
        results = harness.run_replicates(
            setup,
            kind,
            stepsize,
            list(range(cfg.replicates)),
            cfg.workers,
            collect_trace,
        )
        comparison = harness.build_report(
            [harness.summarize_runs(setup, results)],
            constants=harness.setup_constants(setup),
        )
        report.write_comparison(comparison, setup, args.out)
        for result in results:
            traces.extend(result.trace)
    else:
        comparison = harness.compare_policies(setup, collect_trace=collect_trace)
        report.write_comparison(comparison, setup, args.out)
        traces = comparison.traces
    if cfg.trace is not None:
        report.write_trace(traces, pathlib.Path(cfg.trace))


def cli(argv: Optional[List[str]] = None) -> None:
    """Run main, turning any uncaught exception into a one-line JSON
    error on stderr and the failure exit code.
    """
    try:
        main(argv)
    except Exception as error:  # pylint: disable=W0703
        logger.debug("Command failed", exc_info=True)
        sys.stderr.write(
            json.dumps({"error": type(error).__name__, "message": str(error)}) + "\n"
        )
        sys.exit(params.FAILURE_EXIT_CODE)


def run() -> None:
    """Run the command-line interface when executed as a module.

    This function catches any previously uncaught exceptions (at least
    those derived from Exception base class) and sends the appropriate
    exit code to the OS.
    """

    if __name__ == "__main__":
        cli()


run()
