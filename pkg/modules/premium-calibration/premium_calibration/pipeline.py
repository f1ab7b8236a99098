"""Stage implementations and the staged run executor with resume."""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .actuarial import TransitionModel
from .calibrate import Model
from .calibrate import TrainingHistory
from .calibrate import check_consistency
from .calibrate import fit_baseline
from .calibrate import fit_residual
from .calibrate import load_baseline
from .calibrate import save_baseline
from .calibrate import save_model
from .config import RunConfig
from .errors import ConsistencyError
from .errors import InputError
from .mortality import MortalityTable
from .mortality import build_dav_dataset
from .mortality import load_table
from .mortality import synthetic_table
from .mortality import write_table
from .portfolio import GroundTruthModel
from .portfolio import Portfolio
from .portfolio import generate_portfolio
from .portfolio import read_portfolio
from .portfolio import write_portfolio
from .runs import RunManager
from .runs import StageStatus
from .runs import atomic_write_json
from .runs import load_checkpoint
from .validate import BacktestReport
from .validate import backtest_portfolio
from .validate import error_decomposition
from .validate import homogeneity_grid
from .validate import implied_mortality
from .validate import summary_text
from .validate import write_backtest
from .validate import write_curves
from .validate import write_decomposition
from .validate import write_homogeneity
from .validate import write_summary
from .validator import require_valid

logger = logging.getLogger(__name__)

RUN_TABLE_FILE = "table.csv"


def resolve_table(config: RunConfig) -> MortalityTable:
    """The configured table, or the bundled synthetic one when none is set."""
    if config.paths.table is None:
        logger.info("No mortality table configured; using the synthetic table")
        return synthetic_table()
    return load_table(Path(config.paths.table))


def with_run_table(config: RunConfig, run_dir: Path) -> RunConfig:
    """Point paths.table at the run's table.csv once gen-table has written it."""
    table_path = run_dir / RUN_TABLE_FILE
    if not table_path.exists():
        return config
    if config.paths.table is not None and Path(config.paths.table) != table_path:
        logger.warning(f"Using the run's {table_path} in place of the configured table {config.paths.table}")
    return replace(config, paths=replace(config.paths, table=str(table_path)))


def stage_gen_table(out: Path) -> Path:
    write_table(synthetic_table(), out)
    logger.info(f"Synthetic table written to {out}")
    return out


def stage_gen_portfolio(config: RunConfig, table: MortalityTable, out_dir: Path) -> Path:
    gt_config = config.ground_truth
    gt = GroundTruthModel(
        table=table, loading=gt_config.loading, smoker_mult=gt_config.smoker_mult, unisex=gt_config.unisex
    )
    portfolio = generate_portfolio(config.portfolio_config(), gt)
    return write_portfolio(portfolio, out_dir, extra_metadata={"run_config": config.to_dict()})


def stage_fit_baseline(config: RunConfig, table: MortalityTable, out: Path, log_path: Path | None = None) -> Path:
    dataset = build_dav_dataset(table, config.baseline.gender)
    model, history = fit_baseline(dataset, config.baseline, seed=config.seed, log_path=log_path)
    save_baseline(out, model, extra={"table": table.name, "history": history.summary(), "config": config.to_dict()})
    return out


def stage_fit_residual(
    config: RunConfig, portfolio_dir: Path, baseline_path: Path, out: Path, log_path: Path | None = None
) -> Path:
    """Stage-2 training; the checkpoint is rewritten after every epoch."""
    base = load_baseline(baseline_path)
    portfolio = read_portfolio(portfolio_dir)

    def checkpoint(epoch: int, model: Model, history: TrainingHistory) -> None:
        save_model(out, model, extra={"epoch": epoch, "history": history.summary(), "config": config.to_dict()})

    model, history = fit_residual(
        portfolio, base, config.residual, seed=config.seed, log_path=log_path, on_epoch_end=checkpoint
    )
    # final write holds the restored best parameters
    save_model(out, model, extra={"history": history.summary(), "config": config.to_dict()})
    return out


def _load_subject(
    config: RunConfig, portfolio_dir: Path, model_path: Path | None, oracle: bool
) -> tuple[TransitionModel, Portfolio, dict[str, Any] | None]:
    """Model to validate, its portfolio and the training summary stored with the checkpoint."""
    portfolio = read_portfolio(portfolio_dir)
    if oracle:
        if portfolio.ground_truth is None:
            raise InputError(f"portfolio in {portfolio_dir} records no ground-truth model")
        table = resolve_table(config)
        if portfolio.ground_truth.get("table") != table.name:
            logger.warning(
                f"Oracle table '{table.name}' differs from the portfolio's '{portfolio.ground_truth.get('table')}'"
            )
        return GroundTruthModel.from_dict(portfolio.ground_truth, table), portfolio, None
    if model_path is None:
        raise InputError("backtest needs a model checkpoint or the oracle flag")
    document = load_checkpoint(model_path, "model")
    model = Model.from_checkpoint(document)
    check_consistency(model, portfolio)
    return model, portfolio, document.get("history")


def stage_backtest(
    config: RunConfig, portfolio_dir: Path, model_path: Path | None, out_dir: Path, oracle: bool = False
) -> BacktestReport:
    """Backtest CSVs, the error decomposition and the summary."""
    model, portfolio, history = _load_subject(config, portfolio_dir, model_path, oracle)
    report = backtest_portfolio(model, portfolio)
    if oracle:
        check_oracle_identity(report)
    decomposition = error_decomposition(report, bins=config.report.bins)
    write_backtest(report, out_dir)
    write_decomposition(decomposition, out_dir)
    title = "Premium backtest (oracle)" if oracle else "Premium backtest"
    write_summary(summary_text(report, decomposition=decomposition, history=history, title=title), out_dir)
    _write_report_metadata(config, out_dir, oracle)
    return report


def stage_report(
    config: RunConfig, portfolio_dir: Path, model_path: Path | None, out_dir: Path, oracle: bool = False
) -> BacktestReport:
    """Backtest plus implied mortality curves and homogeneity grids."""
    model, portfolio, history = _load_subject(config, portfolio_dir, model_path, oracle)
    table = resolve_table(config)
    report_cfg = config.report

    report = backtest_portfolio(model, portfolio)
    if oracle:
        check_oracle_identity(report)
    decomposition = error_decomposition(report, bins=report_cfg.bins)
    ages = range(report_cfg.ages[0], report_cfg.ages[1] + 1)
    curves = implied_mortality(model, ages, reference=table)
    grids = [
        homogeneity_grid(model, report_cfg.homogeneity_a0, feature, steps=report_cfg.homogeneity_steps)
        for feature in report_cfg.homogeneity_pairs
    ]

    write_backtest(report, out_dir)
    write_decomposition(decomposition, out_dir)
    write_curves(curves, out_dir)
    if grids:
        write_homogeneity(grids, out_dir)
    scores = {grid.feature: grid.score() for grid in grids}
    title = "Calibration report (oracle)" if oracle else "Calibration report"
    text = summary_text(report, homogeneity=scores, decomposition=decomposition, history=history, title=title)
    write_summary(text, out_dir)
    _write_report_metadata(config, out_dir, oracle)
    return report


ORACLE_TOLERANCE = 1e-6


def check_oracle_identity(report: BacktestReport, tolerance: float = ORACLE_TOLERANCE) -> None:
    """The ground-truth model must reproduce every stored premium.

    Raises:
        ConsistencyError: if any relative error exceeds the tolerance.
    """
    worst = float(np.max(np.abs(report.errors))) if report.errors.size else 0.0
    if worst > tolerance or report.unpriceable:
        raise ConsistencyError(
            f"oracle backtest does not reproduce the stored premiums: max |e_rel| = {worst:.3e}, "
            f"{report.unpriceable} unpriceable"
        )
    logger.info(f"Oracle identity holds: max |e_rel| = {worst:.3e}")


def _write_report_metadata(config: RunConfig, out_dir: Path, oracle: bool) -> None:
    atomic_write_json(Path(out_dir) / "report.json", {"oracle": oracle, "run_config": config.to_dict()})


class RunPipeline:
    """Executes the configured stages inside a run directory, resuming after the last completed one.

    Run directory layout:
        table.csv              (gen-table; later stages read it in place of paths.table)
        portfolio/             (gen-portfolio)
        baseline.json, baseline_log.csv
        model.json, residual_log.csv
        backtest/, report/
    """

    def __init__(self, run_manager: RunManager):
        self.run_manager = run_manager

    def execute(self, config: RunConfig, config_path: Path | None = None, run_id: str | None = None) -> str:
        """
        Execute or resume a run.

        Args:
            config: Run configuration
            config_path: Optional config file copied into a new run directory
            run_id: Existing run to resume; a new run is created when None

        Returns:
            run_id of the executed run
        """
        if run_id is not None:
            if not self.run_manager.run_exists(run_id):
                raise InputError(f"Run not found: {run_id}")
            state = self.run_manager.load_state(run_id)
            config = RunConfig.from_dict(state["config"])
            completed = set(state.get("completed_stages", []))
            require_valid(config)
            logger.info(f"Resuming run {run_id}; completed stages: {sorted(completed) or 'none'}")
        else:
            require_valid(config)
            run_id = self.run_manager.create_run(config.stages, config.to_dict(), config_path)
            completed = set()

        run_dir = self.run_manager.get_run_dir(run_id)
        for stage in config.stages:
            if stage in completed:
                logger.info(f"Skipping completed stage '{stage}'")
                continue
            logger.info(f"Run {run_id}: stage '{stage}'")
            try:
                outputs = self._execute_stage(stage, config, run_dir)
            except Exception:
                self.run_manager.mark_stage(run_id, stage, StageStatus.FAILED)
                raise
            self.run_manager.mark_stage(run_id, stage, StageStatus.COMPLETED, outputs)

        self.run_manager.cleanup_old_runs()
        return run_id

    def _execute_stage(self, stage: str, config: RunConfig, run_dir: Path) -> dict[str, str]:
        config = with_run_table(config, run_dir)
        portfolio_dir = run_dir / "portfolio"
        baseline_path = run_dir / "baseline.json"
        model_path = run_dir / "model.json"
        oracle = config.report.oracle

        if stage == "gen-table":
            return {"table": str(stage_gen_table(run_dir / RUN_TABLE_FILE))}
        if stage == "gen-portfolio":
            return {"portfolio": str(stage_gen_portfolio(config, resolve_table(config), portfolio_dir))}
        if stage == "fit-baseline":
            out = stage_fit_baseline(config, resolve_table(config), baseline_path, run_dir / "baseline_log.csv")
            return {"baseline": str(out)}
        if stage == "fit-residual":
            out = stage_fit_residual(config, portfolio_dir, baseline_path, model_path, run_dir / "residual_log.csv")
            return {"model": str(out)}
        if stage == "backtest":
            stage_backtest(config, portfolio_dir, None if oracle else model_path, run_dir / "backtest", oracle)
            return {"backtest": str(run_dir / "backtest")}
        if stage == "report":
            stage_report(config, portfolio_dir, None if oracle else model_path, run_dir / "report", oracle)
            return {"report": str(run_dir / "report")}
        raise InputError(f"Unknown stage: {stage}")
