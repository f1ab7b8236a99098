"""Tests for the premium backtest and the diagnostic reports."""

import dataclasses
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from premium_calibration.actuarial import ExpenseStructure
from premium_calibration.mortality import MortalityTable
from premium_calibration.portfolio import GroundTruthModel
from premium_calibration.portfolio import Portfolio
from premium_calibration.validate import BACKTEST_COLUMNS
from premium_calibration.validate import QUANTILE_LEVELS
from premium_calibration.validate import backtest_portfolio
from premium_calibration.validate import curves_frame
from premium_calibration.validate import error_decomposition
from premium_calibration.validate import error_quantiles
from premium_calibration.validate import homogeneity_grid
from premium_calibration.validate import implied_mortality
from premium_calibration.validate import summary_text
from premium_calibration.validate import write_backtest
from premium_calibration.validate import write_curves
from premium_calibration.validate import write_decomposition
from premium_calibration.validate import write_homogeneity
from premium_calibration.validate import write_summary


@pytest.fixture
def overloaded(table: MortalityTable) -> GroundTruthModel:
    """Ground truth with twice the loading; it overprices every contract."""
    return GroundTruthModel(table=table, loading=2.68)


class TestErrorQuantiles:
    """Tests for quantiles of relative errors."""

    def test_levels_and_interpolation(self):
        quantiles = error_quantiles(np.array([4.0, 0.0, 2.0, 1.0, 3.0]))
        assert list(quantiles) == list(QUANTILE_LEVELS)
        assert quantiles[0.0] == 0.0
        assert quantiles[0.25] == pytest.approx(1.0)
        assert quantiles[0.5] == pytest.approx(2.0)
        assert quantiles[1.0] == 4.0

    def test_empty(self):
        assert all(math.isnan(v) for v in error_quantiles(np.array([])).values())


class TestBacktest:
    """Tests for recomputing premiums from a model."""

    def test_ground_truth_reproduces_premiums(self, ground_truth: GroundTruthModel, small_portfolio: Portfolio):
        """The pricing model itself backtests with zero error."""
        report = backtest_portfolio(ground_truth, small_portfolio)
        assert list(report.results.columns) == BACKTEST_COLUMNS
        assert np.max(np.abs(report.errors)) <= 1e-10
        assert report.share_within() == 1.0
        assert report.meets_targets()
        assert report.excluded == 0

    def test_overpricing_model_gives_negative_errors(self, overloaded: GroundTruthModel, small_portfolio: Portfolio):
        report = backtest_portfolio(overloaded, small_portfolio)
        assert np.all(report.errors < 0)
        assert report.quantiles[1.0] < 0

    def test_zero_premium_excluded(self, ground_truth: GroundTruthModel, small_portfolio: Portfolio):
        contracts = list(small_portfolio.contracts)
        contracts[3] = contracts[3].with_premium(0.0)
        portfolio = dataclasses.replace(small_portfolio, contracts=contracts, _flows=None)
        report = backtest_portfolio(ground_truth, portfolio)
        assert report.excluded == 1
        assert len(report.results) == 11
        assert 3 not in set(report.results["contract"])

    def test_unpriceable_contracts_counted(self, ground_truth: GroundTruthModel, small_portfolio: Portfolio):
        """Expenses above premium income leave every estimate undefined."""
        expenses = ExpenseStructure(alpha=0.9, beta=0.5, gamma1=0.001, gamma2=0.001)
        report = backtest_portfolio(ground_truth, small_portfolio, expenses=expenses)
        assert report.unpriceable == 12
        assert report.results["P_hat"].isna().all()
        assert report.errors.size == 0
        assert math.isnan(report.share_within())

    def test_quantile_row_layout(self, ground_truth: GroundTruthModel, small_portfolio: Portfolio):
        row = backtest_portfolio(ground_truth, small_portfolio).quantile_row()
        alphas, values = row.splitlines()
        assert alphas.startswith("alpha")
        assert values.startswith("q_alpha %")
        assert len(values.split()) == len(QUANTILE_LEVELS) + 2


class TestImpliedMortality:
    """Tests for implied mortality curves."""

    def test_neutral_model_matches_table(self, table: MortalityTable):
        model = GroundTruthModel(table=table, loading=1.0, smoker_mult=1.0, unisex=False)
        curves = implied_mortality(model, range(20, 31), reference=table)
        assert len(curves) == 4
        for curve in curves:
            np.testing.assert_allclose(curve.values, curve.reference)

    def test_smoker_curve_above_non_smoker(self, ground_truth: GroundTruthModel):
        curves = {c.label: c for c in implied_mortality(ground_truth, range(20, 31))}
        assert np.all(curves["male/smoker"].values > curves["male/non-smoker"].values)
        assert curves["male/smoker"].reference is None

    def test_frame(self, ground_truth: GroundTruthModel, table: MortalityTable, temp_dir: Path):
        curves = implied_mortality(ground_truth, range(18, 81), reference=table)
        frame = curves_frame(curves)
        assert len(frame) == 4 * 63
        assert set(frame["smoker"]) == {"yes", "no"}
        path = write_curves(curves, temp_dir)
        assert pd.read_csv(path).shape == (4 * 63, 5)


class TestHomogeneity:
    """Tests for the current-age homogeneity grid."""

    def test_shape(self, ground_truth: GroundTruthModel):
        grid = homogeneity_grid(ground_truth, (20, 30), "smoker", steps=7)
        assert grid.values.shape == (11, 7)
        assert len(grid.to_frame()) == 77

    def test_ground_truth_depends_on_current_age_only(self, ground_truth: GroundTruthModel):
        """Smoker differences of the pricing model are constant along a0 + k."""
        grid = homogeneity_grid(ground_truth, (20, 40), "smoker", steps=10)
        assert np.all(grid.values > 0)
        assert grid.score() == pytest.approx(0.0, abs=1e-15)

    def test_unisex_has_no_gender_effect(self, ground_truth: GroundTruthModel):
        grid = homogeneity_grid(ground_truth, (20, 25), "gender", steps=5)
        np.testing.assert_array_equal(grid.values, 0.0)

    def test_current_age_keys(self, ground_truth: GroundTruthModel):
        grid = homogeneity_grid(ground_truth, (20, 21), "smoker", steps=4, m=2)
        np.testing.assert_array_equal(grid.current_age_keys(), [[40, 41, 42, 43], [42, 43, 44, 45]])

    def test_unknown_feature(self, ground_truth: GroundTruthModel):
        with pytest.raises(ValueError):
            homogeneity_grid(ground_truth, (20, 25), "income")

    def test_written_grid(self, ground_truth: GroundTruthModel, temp_dir: Path):
        grids = [homogeneity_grid(ground_truth, (20, 22), f, steps=3) for f in ("smoker", "gender")]
        frame = pd.read_csv(write_homogeneity(grids, temp_dir))
        assert list(frame.columns) == ["feature", "a0", "k", "current_age", "difference"]
        assert len(frame) == 18


class TestErrorDecomposition:
    """Tests for binned error statistics."""

    def test_every_contract_in_one_bin(self, overloaded: GroundTruthModel, small_portfolio: Portfolio):
        decomposition = error_decomposition(backtest_portfolio(overloaded, small_portfolio), bins=3)
        for feature, rows in decomposition.groupby("feature"):
            assert rows["count"].sum() == 12, feature
        assert len(decomposition[decomposition["feature"] == "a0"]) == 3

    def test_payment_style_levels(self, overloaded: GroundTruthModel, small_portfolio: Portfolio):
        """m is binned by its levels; unused levels keep a zero count."""
        decomposition = error_decomposition(backtest_portfolio(overloaded, small_portfolio))
        styles = decomposition[decomposition["feature"] == "m"]
        assert list(styles["lower"]) == [1.0, 2.0, 4.0, 12.0]
        assert list(styles["count"])[2:] == [0, 0]

    def test_single_feature(self, overloaded: GroundTruthModel, small_portfolio: Portfolio, temp_dir: Path):
        report = backtest_portfolio(overloaded, small_portfolio)
        decomposition = error_decomposition(report, features=("S",), bins=2)
        assert decomposition["count"].sum() == 12
        assert pd.read_csv(write_decomposition(decomposition, temp_dir)).shape[0] == 2


class TestSummary:
    """Tests for the plain-text summary."""

    def test_met_targets(self, ground_truth: GroundTruthModel, small_portfolio: Portfolio, temp_dir: Path):
        report = backtest_portfolio(ground_truth, small_portfolio)
        text = summary_text(report, homogeneity={"smoker": 0.0})
        assert "Quantiles of relative errors [in %]" in text
        assert "homogeneity score (smoker)" in text
        assert "Diagnosis" not in text
        assert write_summary(text, temp_dir).read_text() == text

    def test_missed_targets_diagnosed(self, overloaded: GroundTruthModel, small_portfolio: Portfolio):
        report = backtest_portfolio(overloaded, small_portfolio)
        decomposition = error_decomposition(report)
        history = {"epochs": 1000, "stopped_early": False, "best_epoch": 999}
        text = summary_text(report, decomposition=decomposition, history=history)
        assert "Targets missed" in text
        assert "largest mean |e_rel|" in text
        assert "all 1000 epochs" in text

    def test_backtest_files(self, ground_truth: GroundTruthModel, small_portfolio: Portfolio, temp_dir: Path):
        paths = write_backtest(backtest_portfolio(ground_truth, small_portfolio), temp_dir)
        assert paths["backtest"].read_text().splitlines()[0] == "contract,P,P_hat,e_rel"
        assert len(pd.read_csv(paths["quantiles"])) == len(QUANTILE_LEVELS)
