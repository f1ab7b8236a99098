"""Pytest fixtures for premium-calibration tests."""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from premium_calibration.actuarial import Contract
from premium_calibration.actuarial import DiscountFactor
from premium_calibration.actuarial import ExpenseStructure
from premium_calibration.calibrate import BaselineModel
from premium_calibration.calibrate import FeatureScalers
from premium_calibration.calibrate import Model
from premium_calibration.calibrate import fit_residual_scaler
from premium_calibration.config import RunConfig
from premium_calibration.mortality import MortalityTable
from premium_calibration.mortality import build_dav_dataset
from premium_calibration.mortality import synthetic_table
from premium_calibration.nn import FeedForwardNet
from premium_calibration.nn import ResidualNet
from premium_calibration.portfolio import GroundTruthModel
from premium_calibration.portfolio import Portfolio
from premium_calibration.portfolio import PortfolioConfig
from premium_calibration.portfolio import generate_portfolio


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def table() -> MortalityTable:
    """Bundled synthetic mortality table."""
    return synthetic_table()


@pytest.fixture
def expenses() -> ExpenseStructure:
    return ExpenseStructure(alpha=0.025, beta=0.03, gamma1=0.001, gamma2=0.001)


@pytest.fixture
def discount() -> DiscountFactor:
    return DiscountFactor(v=1 / 1.0125)


@pytest.fixture
def ground_truth(table: MortalityTable) -> GroundTruthModel:
    return GroundTruthModel(table=table)


@pytest.fixture
def sample_contract() -> Contract:
    """Monthly contract used by the cash-flow examples."""
    return Contract(year=2015, month=1, a0=40, n=20, t=10, S=100_000.0, m=12, gender="male", smoker=False, P=1200.0)


@pytest.fixture
def small_config() -> PortfolioConfig:
    """Short contracts so sequences stay a few steps long."""
    return PortfolioConfig(N=12, seed=7, n_max=4, styles=(1, 2))


@pytest.fixture
def small_portfolio(small_config: PortfolioConfig, ground_truth: GroundTruthModel) -> Portfolio:
    return generate_portfolio(small_config, ground_truth)


@pytest.fixture
def tiny_baseline(table: MortalityTable) -> BaselineModel:
    """Untrained baseline with one hidden layer of width 4."""
    dataset = build_dav_dataset(table, "male")
    net = FeedForwardNet([2, 4, 2], np.random.default_rng(0))
    model = BaselineModel(net=net, scaler=dataset.scaler, gender="male")
    model.freeze()
    return model


@pytest.fixture
def tiny_model(tiny_baseline: BaselineModel, small_portfolio: Portfolio) -> Model:
    """Composite model with a residual net of widths (4, 3, 3, 2)."""
    scalers = FeatureScalers(base=tiny_baseline.scaler, residual=fit_residual_scaler(small_portfolio.contracts))
    res = ResidualNet([4, 3, 3, 2], np.random.default_rng(1))
    return Model(base=tiny_baseline, res=res, scalers=scalers)


@pytest.fixture
def desk_config() -> RunConfig:
    """Run configuration small enough for end-to-end tests."""
    return RunConfig.from_dict(
        {
            "name": "desk",
            "seed": 3,
            "portfolio": {"N": 6, "n_max": 3, "styles": [1, 2]},
            "baseline": {"widths": [2, 4, 2], "max_epochs": 2, "check_every": 1, "log_every": 1},
            "residual": {"widths": [4, 3, 3, 2], "max_epochs": 2, "batch_size": 4, "log_every": 1},
            "report": {"ages": [20, 25], "homogeneity_a0": [20, 22], "homogeneity_steps": 3, "bins": 2},
        }
    )
