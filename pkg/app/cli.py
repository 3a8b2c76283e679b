"""Command-line surface: one subcommand per campaign stage."""

import argparse
import logging
import sys
from collections.abc import Sequence
from typing import Optional

from pydantic import ValidationError

from app.campaign_service import Campaign, StageError, run_stage
from app.config import load_config
from app.expressions import ExpressionError
from app.fault_service import enumerate_fault_points
from app.scenario_parser import ScenarioReferenceError, ScenarioSyntaxError, load_scenario

logger = logging.getLogger(__name__)

STAGES = ("profile", "schedule", "inject", "fca", "detect", "baseline", "campaign")
PHASED = ("schedule", "inject", "fca")


def _delay_values(text: str) -> list[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("scenario", help="scenario file (cascadelab-scenario v1)")
    parser.add_argument("--out", dest="output_dir", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--budget-multiplier", type=int)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--p-value", type=float)
    parser.add_argument("--delay-values", type=_delay_values, help="e.g. 100,250,500")
    parser.add_argument("--timeout-min", type=int)
    parser.add_argument("--timeout-max", type=int)
    parser.add_argument("--beam-size", type=int)
    parser.add_argument("--max-delay-injections", type=int)
    parser.add_argument("--max-depth", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--allocation", choices=("3pa", "random"))
    parser.add_argument("--no-retrain", dest="retrain_after_phase3", action="store_const", const=False)
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadelab", description="Find self-sustaining cascading failures.")
    commands = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        command = commands.add_parser(stage)
        _common(command)
        if stage in PHASED:
            command.add_argument("--phase", type=int, required=True, choices=(0, 1, 2, 3), help="0 = random allocation")
    validate = commands.add_parser("validate", help="lint a scenario file")
    validate.add_argument("scenario")
    validate.add_argument("-v", "--verbose", action="store_true")
    return parser


def _validate(path: str) -> int:
    try:
        scenario = load_scenario(path)
    except (ScenarioSyntaxError, ScenarioReferenceError, ExpressionError, OSError) as exc:
        logger.error(f"{path}: {exc}")
        return 2
    faults = enumerate_fault_points(scenario)
    sys.stdout.write(
        f"{scenario.name}: {len(scenario.components)} components, {len(scenario.tests)} tests, "
        f"{len(faults)} fault points\n"
    )
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if args.command == "validate":
        return _validate(args.scenario)
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "phase", "verbose")
    }
    if getattr(args, "phase", None) == 0 and overrides.get("allocation") is None:
        overrides["allocation"] = "random"
    try:
        config = load_config(overrides)
    except ValidationError as exc:
        logger.error(f"invalid configuration: {exc}")
        return 2
    try:
        campaign = Campaign(config)
    except OSError as exc:
        logger.error(f"cannot prepare output directory {config.output_dir}: {exc}")
        return 2
    try:
        return run_stage(args.command, campaign, getattr(args, "phase", None))
    except StageError as exc:
        logger.error(f"cascadelab {args.command} aborted in stage {exc.stage}")
        return 2
