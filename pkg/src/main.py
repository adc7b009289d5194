import argparse
import sys
from typing import List, Optional

from loguru import logger

from src.components.cli import COMMANDS, load_config_file, merge_options
from src.components.errors import GcphError

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - {message}"


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--out", help="Output directory (created if missing)")
    parser.add_argument("--config", help="JSON file with option values; flags take precedence")
    parser.add_argument("--log-level", dest="log_level", help="Log level for stderr diagnostics (default INFO)")


def _add_schema(parser: argparse.ArgumentParser):
    parser.add_argument("--schema", help="JSON schema file {time_col, event_col, categorical_cols, ...}")
    parser.add_argument("--time-col", dest="time_col", help="Time column (default 'time')")
    parser.add_argument("--event-col", dest="event_col", help="Event column (default 'event')")
    parser.add_argument("--categorical", type=_str_list, help="Comma-separated categorical columns")


def _add_training(parser: argparse.ArgumentParser):
    parser.add_argument("--num-intervals", dest="num_intervals", type=int, help="Grid intervals G (default 5)")
    parser.add_argument("--order", type=int, help="Spline order K (default 3)")
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, help="Adam learning rate (default 0.01)")
    parser.add_argument("--max-steps", dest="max_steps", type=int, help="Adam steps (default 2000)")
    parser.add_argument("--gamma", type=float, help="Regularization weight (default 0.1)")
    parser.add_argument("--mu1", type=float, help="L1 weight (default 1)")
    parser.add_argument("--mu2", type=float, help="Entropy weight (default 10)")
    parser.add_argument("--linear-only", dest="linear_only", action="store_true", help="Identity activations only")
    parser.add_argument("--workers", type=int, help="Concurrent runs (default 1)")
    parser.add_argument("--log-every", dest="log_every", type=int, help="Write every Nth step to the loss log (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageErrorParser(
        description="Spline Cox proportional hazards: simulate, train, evaluate and symbolify",
        argument_default=argparse.SUPPRESS,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Write a synthetic dataset", argument_default=argparse.SUPPRESS)
    simulate.add_argument("--kind", choices=["linear", "nonlinear"], help="Ground-truth log-risk (default linear)")
    simulate.add_argument("--n", type=int, help="Number of subjects (default 2000)")
    simulate.add_argument("--seed", type=int, help="Generator seed (default 0)")
    simulate.add_argument("--lam", type=float, help="Peak hazard ratio of the nonlinear truth (default 5)")
    simulate.add_argument("--r", type=float, help="Width of the nonlinear truth (default 2)")
    simulate.add_argument("--mean-t0", dest="mean_t0", type=float, help="Mean baseline time (default 5)")
    simulate.add_argument("--censor-fraction", dest="censor_fraction", type=float, help="Capped share (default 0.10)")
    simulate.add_argument("--test-fraction", dest="test_fraction", type=float, help="Also write train.csv/test.csv")
    _add_common(simulate)

    train = commands.add_parser("train", help="Train models", argument_default=argparse.SUPPRESS)
    train.add_argument("--data", help="Training CSV or Excel file")
    train.add_argument("--seed", type=int, help="Single seed (default 0), writes model.json")
    train.add_argument("--seeds", type=_int_list, help="Comma-separated seeds, writes model_seed<S>.json")
    _add_schema(train)
    _add_training(train)
    _add_common(train)

    evaluate = commands.add_parser("eval", help="Evaluate models on a test file", argument_default=argparse.SUPPRESS)
    evaluate.add_argument("--models", nargs="+", help="Model JSON files")
    evaluate.add_argument("--train", help="Training file (horizons, censoring and baseline hazard)")
    evaluate.add_argument("--test", help="Test file")
    evaluate.add_argument("--baseline-cph", dest="baseline_cph", action="store_true", help="Add a linear CPH row")
    evaluate.add_argument("--truth-scores", dest="truth_scores", action="store_true", help="Add a ground-truth row")
    evaluate.add_argument("--weighting", choices=["event_weighted", "harrell"], help="C-index pair weighting")
    evaluate.add_argument("--surface", action="store_true", help="Write f on a 101x101 grid over [-1, 1]^2")
    _add_schema(evaluate)
    _add_common(evaluate)

    symbolic = commands.add_parser("symbolify", help="Extract formulas", argument_default=argparse.SUPPRESS)
    symbolic.add_argument("--models", nargs="+", help="Model JSON files")
    symbolic.add_argument("--train", help="Training file (feature ranges)")
    symbolic.add_argument("--candidates", type=_str_list, help="Comma-separated candidate names")
    symbolic.add_argument("--decimals", type=int, help="Rounding of the rendered formula (default 2)")
    _add_schema(symbolic)
    _add_common(symbolic)

    sweep = commands.add_parser("sweep", help="Ablation over order or gamma", argument_default=argparse.SUPPRESS)
    sweep.add_argument("--data", help="Training CSV or Excel file")
    sweep.add_argument("--test", help="Test file; without it --data is split")
    sweep.add_argument("--test-fraction", dest="test_fraction", type=float, help="Split share (default 0.2)")
    sweep.add_argument("--split-seed", dest="split_seed", type=int, help="Split seed (default 0)")
    axis = sweep.add_mutually_exclusive_group()
    axis.add_argument("--order", dest="order_values", type=_int_list, help="Comma-separated spline orders")
    axis.add_argument("--gamma", dest="gamma_values", type=_float_list, help="Comma-separated gamma values")
    sweep.add_argument("--seeds", type=_int_list, help="Comma-separated seeds (default 0,1,2)")
    sweep.add_argument("--weighting", choices=["event_weighted", "harrell"], help="C-index pair weighting")
    sweep.add_argument("--num-intervals", dest="num_intervals", type=int, help="Grid intervals G (default 5)")
    sweep.add_argument("--learning-rate", dest="learning_rate", type=float, help="Adam learning rate")
    sweep.add_argument("--max-steps", dest="max_steps", type=int, help="Adam steps (default 2000)")
    sweep.add_argument("--mu1", type=float, help="L1 weight (default 1)")
    sweep.add_argument("--mu2", type=float, help="Entropy weight (default 10)")
    sweep.add_argument("--linear-only", dest="linear_only", action="store_true", help="Identity activations only")
    sweep.add_argument("--workers", type=int, help="Concurrent cells (default 1)")
    _add_schema(sweep)
    _add_common(sweep)
    return parser


def configure_logging(level: str = "INFO"):
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        configure_logging(args.get("log_level", "INFO"))
    except ValueError as e:
        sys.stderr.write(f"Invalid log level: {e}\n")
        return 1

    try:
        file_options = load_config_file(args["config"]) if "config" in args else None
        options = merge_options(command, file_options, args)
        manifest = COMMANDS[command](options)
    except GcphError as e:
        logger.error(f"{command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{command} failed: {e}")
        return 2
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
