"""Batch command line: one subcommand per pipeline stage plus `run`, `plot` and `config`."""
import argparse
import asyncio
import json
import logging
import sys
from typing import List, Optional

from wildfire_rnd.core.config import RunConfig, load_config
from wildfire_rnd.core.enums import ModelKind, Stage
from wildfire_rnd.core.errors import WildfireRndError
from wildfire_rnd.core.state import RunState
from wildfire_rnd.handlers.calibration_handler import GROUPS
from wildfire_rnd.handlers.panel_handler import PANEL_KINDS
from wildfire_rnd.pipeline import PLOT_KINDS, Pipeline, emit_plot_data, parse_stages

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wildfire-rnd",
                                     description="Option-implied wildfire risk: densities, kernels and panels")
    parser.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("ingest", "deamericanize", "repair", "rnd", "kernel", "prop1-verify"):
        sub.add_parser(name, help=f"run the {name} stage")

    garch = sub.add_parser("garch", help="fit GARCH-Wildfire models or forecast physical densities")
    garch.add_argument("step", choices=["fit", "forecast", "all"], nargs="?", default="all")

    calibrate = sub.add_parser("calibrate", help="fit a jump model to control or treated surfaces")
    calibrate.add_argument("--model", choices=[k.value for k in ModelKind], action="append")
    calibrate.add_argument("--group", choices=list(GROUPS), action="append")

    panel = sub.add_parser("panel", help="fixed-effects treatment regressions")
    panel.add_argument("analysis", choices=list(PANEL_KINDS), nargs="*")

    run = sub.add_parser("run", help="run several stages in pipeline order")
    run.add_argument("--stages", help="comma-separated stage names (all stages when omitted)")

    plot = sub.add_parser("plot", help="write tidy CSV tables for external plotting")
    plot.add_argument("kind", choices=list(PLOT_KINDS))
    plot.add_argument("--ticker")
    plot.add_argument("--date", help="quote date, YYYY-MM-DD")
    plot.add_argument("--maturity", type=float)

    config = sub.add_parser("config", help="configuration helpers")
    config.add_argument("action", choices=["print-defaults"])
    return parser


def _stages_and_options(args):
    if args.command == "run":
        return parse_stages(args.stages), {}
    if args.command == "garch":
        return (Stage.GARCH,), {'garch': args.step}
    if args.command == "calibrate":
        return (Stage.CALIBRATE,), {'models': args.model, 'groups': args.group}
    if args.command == "panel":
        return (Stage.PANEL,), {'panel': args.analysis or None}
    return (Stage(args.command),), {}


async def main_async(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

    if args.command == "config":
        print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
        return 0

    try:
        config = load_config(args.config)
        if args.command == "plot":
            state = RunState.get_instance().configure(config)
            print(emit_plot_data(args.kind, state, ticker=args.ticker, date=args.date, maturity=args.maturity))
            return 0
        stages, options = _stages_and_options(args)
        outcome = await Pipeline(config).run(stages, options)
    except WildfireRndError as exc:
        logger.error(f"[PIPELINE] {exc}")
        return exc.exit_code
    if outcome.exit_code == 0:
        print(json.dumps(outcome.summaries, indent=2, sort_keys=True, default=str))
    return outcome.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    return asyncio.run(main_async(argv))


if __name__ == "__main__":
    sys.exit(main())
