"""Command-line entry point: one subcommand per pipeline stage plus a staged run."""

import argparse
import logging
import sys
from collections.abc import Callable
from collections.abc import Sequence
from pathlib import Path

from .config import RunConfig
from .errors import CalibrationError
from .errors import InputError
from .pipeline import RunPipeline
from .pipeline import resolve_table
from .pipeline import stage_backtest
from .pipeline import stage_fit_baseline
from .pipeline import stage_fit_residual
from .pipeline import stage_gen_portfolio
from .pipeline import stage_gen_table
from .pipeline import stage_report
from .runs import RunManager
from .validator import require_valid

logger = logging.getLogger(__name__)

# (flag attribute, config section, config field)
OVERRIDES = (
    ("table", "paths", "table"),
    ("n", "portfolio", "N"),
    ("gender", "baseline", "gender"),
    ("lr", "residual", "lr"),
    ("runs_dir", "paths", "runs_dir"),
)


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    config_path = getattr(args, "config", None)
    config = RunConfig.from_yaml(Path(config_path)) if config_path else RunConfig()

    for attr, section, name in OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            setattr(getattr(config, section), name, str(value) if isinstance(value, Path) else value)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "epochs_max", None) is not None:
        if args.command == "fit-baseline":
            config.baseline.max_epochs = args.epochs_max
        else:
            config.residual.max_epochs = args.epochs_max
    if getattr(args, "oracle", False):
        config.report.oracle = True

    require_valid(config)
    return config


def _default_log(out: Path) -> Path:
    return out.with_name(f"{out.stem}_log.csv")


def cmd_gen_table(args: argparse.Namespace) -> int:
    stage_gen_table(args.out)
    return 0


def cmd_gen_portfolio(args: argparse.Namespace) -> int:
    config = load_config(args)
    path = stage_gen_portfolio(config, resolve_table(config), args.out)
    print(f"Portfolio written to {path}")
    return 0


def cmd_fit_baseline(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = stage_fit_baseline(config, resolve_table(config), args.out, args.log or _default_log(args.out))
    print(f"Baseline checkpoint written to {out}")
    return 0


def cmd_fit_residual(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = stage_fit_residual(config, args.portfolio, args.baseline, args.out, args.log or _default_log(args.out))
    print(f"Model checkpoint written to {out}")
    return 0


def cmd_backtest(args: argparse.Namespace) -> int:
    config = load_config(args)
    stage_backtest(config, args.portfolio, args.model, args.out, oracle=args.oracle)
    print((args.out / "summary.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    config = load_config(args)
    stage_report(config, args.portfolio, args.model, args.out, oracle=args.oracle)
    print((args.out / "summary.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    if args.config is None and args.resume is None:
        raise InputError("run needs --config or --resume")
    config = load_config(args)
    pipeline = RunPipeline(RunManager(Path(config.paths.runs_dir)))
    run_id = pipeline.execute(config, config_path=args.config, run_id=args.resume)
    print(f"Run {run_id} completed in {Path(config.paths.runs_dir) / run_id}")
    return 0


def _add_subject_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--portfolio", type=Path, required=True, help="Portfolio directory or CSV file")
    subject = parser.add_mutually_exclusive_group(required=True)
    subject.add_argument("--model", type=Path, help="Residual model checkpoint")
    subject.add_argument("--oracle", action="store_true", help="Backtest with the stored ground-truth model")
    parser.add_argument("--table", type=Path, help="Mortality table CSV (reference curves, oracle)")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration YAML")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="premium-calibration",
        description="Calibrate Markov mortality probabilities to observed term-life premiums.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen_table = commands.add_parser("gen-table", parents=[common], help="Write the bundled synthetic table")
    gen_table.add_argument("--out", type=Path, required=True, help="Output CSV")
    gen_table.set_defaults(handler=cmd_gen_table)

    gen_portfolio = commands.add_parser("gen-portfolio", parents=[common], help="Generate a priced portfolio")
    gen_portfolio.add_argument("--n", type=int, help="Number of contracts")
    gen_portfolio.add_argument("--seed", type=int, help="Portfolio seed")
    gen_portfolio.add_argument("--table", type=Path, help="Mortality table CSV")
    gen_portfolio.add_argument("--out", type=Path, required=True, help="Output directory")
    gen_portfolio.set_defaults(handler=cmd_gen_portfolio)

    fit_baseline = commands.add_parser("fit-baseline", parents=[common], help="Fit the baseline net to a table")
    fit_baseline.add_argument("--table", type=Path, help="Mortality table CSV")
    fit_baseline.add_argument("--gender", choices=["male", "female"], help="Table column to fit")
    fit_baseline.add_argument("--epochs-max", type=int, help="Epoch budget")
    fit_baseline.add_argument("--seed", type=int, help="Initialisation and shuffling seed")
    fit_baseline.add_argument("--out", type=Path, required=True, help="Checkpoint path")
    fit_baseline.add_argument("--log", type=Path, help="Training log CSV (default: next to the checkpoint)")
    fit_baseline.set_defaults(handler=cmd_fit_baseline)

    fit_residual = commands.add_parser("fit-residual", parents=[common], help="Train the residual net on premiums")
    fit_residual.add_argument("--portfolio", type=Path, required=True, help="Portfolio directory or CSV file")
    fit_residual.add_argument("--baseline", type=Path, required=True, help="Baseline checkpoint")
    fit_residual.add_argument("--epochs-max", type=int, help="Epoch budget")
    fit_residual.add_argument("--lr", type=float, help="Learning rate (default depends on the baseline gender)")
    fit_residual.add_argument("--seed", type=int, help="Initialisation and shuffling seed")
    fit_residual.add_argument("--out", type=Path, required=True, help="Checkpoint path")
    fit_residual.add_argument("--log", type=Path, help="Training log CSV (default: next to the checkpoint)")
    fit_residual.set_defaults(handler=cmd_fit_residual)

    backtest = commands.add_parser("backtest", parents=[common], help="Recompute premiums and report errors")
    _add_subject_arguments(backtest)
    backtest.set_defaults(handler=cmd_backtest)

    report = commands.add_parser("report", parents=[common], help="Backtest plus curves and homogeneity grids")
    _add_subject_arguments(report)
    report.set_defaults(handler=cmd_report)

    run = commands.add_parser("run", parents=[common], help="Execute the configured stages in a run directory")
    run.add_argument("--resume", metavar="RUN_ID", help="Resume an existing run")
    run.add_argument("--runs-dir", type=Path, help="Directory holding run directories")
    run.set_defaults(handler=cmd_run)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code: 0 ok, 2 input, 3 numerical, 4 consistency, 1 other."""
    args = build_parser().parse_args(argv)
    configure_logging(verbose=args.verbose, quiet=args.quiet)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except CalibrationError as e:
        logger.debug(f"{type(e).__name__}: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
