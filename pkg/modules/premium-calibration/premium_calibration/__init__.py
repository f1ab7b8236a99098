"""Calibrate Markov mortality probabilities to observed term-life premiums."""

from .actuarial import Contract
from .actuarial import DiscountFactor
from .actuarial import ExpenseStructure
from .actuarial import equivalence_premium
from .actuarial import psi
from .calibrate import BaselineModel
from .calibrate import Model
from .calibrate import fit_baseline
from .calibrate import fit_residual
from .config import RunConfig
from .errors import CalibrationError
from .errors import ConsistencyError
from .errors import InputError
from .errors import NumericalError
from .mortality import MortalityTable
from .mortality import load_table
from .mortality import synthetic_table
from .pipeline import RunPipeline
from .portfolio import GroundTruthModel
from .portfolio import Portfolio
from .portfolio import generate_portfolio
from .validate import BacktestReport
from .validate import backtest_portfolio

__all__ = [
    "BacktestReport",
    "BaselineModel",
    "CalibrationError",
    "ConsistencyError",
    "Contract",
    "DiscountFactor",
    "ExpenseStructure",
    "GroundTruthModel",
    "InputError",
    "Model",
    "MortalityTable",
    "NumericalError",
    "Portfolio",
    "RunConfig",
    "RunPipeline",
    "backtest_portfolio",
    "equivalence_premium",
    "fit_baseline",
    "fit_residual",
    "generate_portfolio",
    "load_table",
    "psi",
    "synthetic_table",
]
