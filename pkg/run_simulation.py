import argparse
import logging
import sys

import settings
from coordinator import InfeasibleRunError, run
from error_bound import error_traces
from export_outputs import export_outputs, timing_table
from scenarios import ScenarioError, load_scenario, parse_scenario, validate_world

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_INFEASIBLE = 3


def build_parser():
    parser = argparse.ArgumentParser(description="Run a multi-robot NMPC coordination scenario")
    parser.add_argument('--scenario', required=True, help="builtin name or path to a scenario JSON file")
    parser.add_argument('--mode', choices=["distributed", "centralized"], default=None)
    parser.add_argument('--steps', type=int, default=None, help="number of closed-loop steps T")
    parser.add_argument('--out', default=settings.OUT_DIR, help="output directory")
    parser.add_argument('--delay', type=int, default=None, help="message bus delay in steps")
    parser.add_argument('--trace-error-bound', action='store_true')
    parser.add_argument('--timing', action='store_true', help="print the timing table")
    parser.add_argument('--figures', action='store_true', help="also render PNG figures")
    parser.add_argument('--workers', type=int, default=settings.WORKERS)
    parser.add_argument('--log-level', default=settings.LOG_LEVEL)
    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG_ERROR if e.code else EXIT_OK

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_scenario(args.scenario)
        updates = {}
        if args.delay is not None:
            updates["bus_delay"] = args.delay
        if args.steps is not None:
            updates["steps"] = args.steps
        if args.mode is not None:
            updates["mode"] = args.mode
        if args.trace_error_bound:
            updates["trace_error_bound"] = True
        if updates:
            config = parse_scenario({**config.model_dump(), **updates})
        world = validate_world(config)
    except ScenarioError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR

    exit_code = EXIT_OK
    try:
        log = run(world, workers=max(1, args.workers))
    except InfeasibleRunError as e:
        logger.warning(f"Run aborted: {e}")
        log = e.log
        exit_code = EXIT_INFEASIBLE

    if not log.trajectory_rows:
        logger.warning("No steps were simulated, nothing to export")
        return exit_code

    try:
        export_outputs(log, args.out, figures=args.figures)
    except OSError as e:
        logger.error(f"Could not write outputs to '{args.out}': {e}")
        return EXIT_CONFIG_ERROR

    for pair, trace in error_traces(log.error_rows).items():
        if not trace.holds():
            logger.warning(f"Prediction error exceeded its bound for pair {pair}")

    if args.timing:
        print(timing_table(log).to_string(index=False))
    print(f"Finished '{config.name}' ({world.mode}): {log.steps_completed} steps, outputs in '{args.out}'")
    return exit_code


if __name__ == "__main__":
    sys.exit(run_cli())
