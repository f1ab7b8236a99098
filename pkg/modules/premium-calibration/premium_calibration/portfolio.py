"""Synthetic term-life portfolios priced with a hidden ground-truth mortality model."""

import logging
import math
from collections.abc import Iterator
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .actuarial import GENDERS
from .actuarial import PAYMENT_STYLES
from .actuarial import Contract
from .actuarial import DiscountFactor
from .actuarial import ExpenseStructure
from .actuarial import TransitionMatrix
from .actuarial import TransitionSequence
from .actuarial import discounted_cash_flows
from .actuarial import equivalence_premium
from .actuarial import transition_matrix
from .actuarial import transition_sequence
from .errors import InputError
from .errors import NumericalError
from .errors import SchemaError
from .errors import UnpriceableContractError
from .mortality import MortalityTable
from .runs import atomic_write_json
from .runs import atomic_write_text
from .runs import read_json

logger = logging.getLogger(__name__)

PORTFOLIO_COLUMNS = ["year", "month", "a0", "n", "t", "S", "P", "m", "gender", "smoker"]
PORTFOLIO_FILE = "portfolio.csv"
METADATA_FILE = "portfolio.json"


@dataclass
class GroundTruthModel:
    """First-order mortality: loaded table rates, smoker multiplier, optional unisex blend.

    Depends on the iteration only through the current age a0 + floor(k/m).
    """

    table: MortalityTable
    loading: float = 1.34
    smoker_mult: float = 1.5
    unisex: bool = True

    def validate(self) -> list[str]:
        errors = []
        if not self.loading > 0:
            errors.append(f"ground_truth.loading must be positive, got {self.loading}")
        if not self.smoker_mult > 0:
            errors.append(f"ground_truth.smoker_mult must be positive, got {self.smoker_mult}")
        return errors

    def annual_rates(self, ages: np.ndarray, gender: str, smoker: bool) -> np.ndarray:
        """Loaded annual death probabilities at integer ages, clamped to [0, 1]."""
        column = self.table.q_blend() if self.unisex else self.table.q(gender)
        q = column[self.table.clamp_ages(ages)]
        multiplier = self.loading * (self.smoker_mult if smoker else 1.0)
        return np.minimum(1.0, multiplier * q)

    def predict_sequence(self, contract: Contract) -> TransitionSequence:
        k = np.arange(contract.iterations)
        ages = contract.a0 + k // contract.m
        return transition_sequence(self.annual_rates(ages, contract.gender, contract.smoker) / contract.m)

    def to_dict(self) -> dict[str, Any]:
        return {
            "table": self.table.name,
            "loading": self.loading,
            "smoker_mult": self.smoker_mult,
            "unisex": self.unisex,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], table: MortalityTable) -> "GroundTruthModel":
        return cls(table=table, loading=data["loading"], smoker_mult=data["smoker_mult"], unisex=data["unisex"])


def ground_truth_pi(gt: GroundTruthModel, contract: Contract, k: int) -> TransitionMatrix:
    """One-step matrix of the ground-truth model at iteration k."""
    age = contract.a0 + k // contract.m
    rate = gt.annual_rates(np.array([age]), contract.gender, contract.smoker)[0]
    return transition_matrix(rate / contract.m)


@dataclass
class PortfolioConfig:
    """Portfolio size, seed, feature marginals and pricing assumptions.

    ``n`` follows a geometric law truncated to 1..n_max, ``t`` a geometric law
    truncated to 1..n. The success parameters give mean durations of about
    13.9 and 7.6 years at the default n_max of 48.
    """

    N: int = 10_000
    seed: int = 42
    a0_min: int = 18
    a0_max: int = 60
    years: tuple[int, ...] = (2015, 2016)
    S_min: float = 1_000.0
    S_max: float = 1_000_000.0
    n_max: int = 48
    n_geometric_p: float = 0.061
    t_geometric_p: float = 0.085
    styles: tuple[int, ...] = PAYMENT_STYLES
    expenses: ExpenseStructure = field(default_factory=ExpenseStructure)
    discount: DiscountFactor = field(default_factory=DiscountFactor)
    max_resample: int = 100

    def validate(self) -> list[str]:
        errors = []
        if self.N < 1:
            errors.append(f"portfolio.N must be at least 1, got {self.N}")
        if not 0 <= self.a0_min <= self.a0_max:
            errors.append(f"portfolio age range must satisfy 0 <= a0_min <= a0_max, got {self.a0_min}..{self.a0_max}")
        if not self.years:
            errors.append("portfolio.years must not be empty")
        if not 0 < self.S_min <= self.S_max:
            errors.append(f"portfolio sum insured must satisfy 0 < S_min <= S_max, got {self.S_min}..{self.S_max}")
        if self.n_max < 1:
            errors.append(f"portfolio.n_max must be at least 1, got {self.n_max}")
        for name in ("n_geometric_p", "t_geometric_p"):
            value = getattr(self, name)
            if not 0 < value < 1:
                errors.append(f"portfolio.{name} must be in (0, 1), got {value}")
        if not self.styles or not set(self.styles) <= set(PAYMENT_STYLES):
            errors.append(f"portfolio.styles must be a non-empty subset of {PAYMENT_STYLES}, got {list(self.styles)}")
        if self.max_resample < 0:
            errors.append(f"portfolio.max_resample must be non-negative, got {self.max_resample}")
        errors.extend(self.expenses.validate())
        errors.extend(self.discount.validate())
        return errors


def contract_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 substream for contract ``index`` of a portfolio seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def truncated_geometric(rng: np.random.Generator, p: float, upper: int) -> int:
    """Draw from the geometric law on {1, 2, ...} with success probability p, conditioned on <= upper."""
    u = rng.random()
    mass = 1.0 - (1.0 - p) ** upper
    value = math.ceil(math.log1p(-u * mass) / math.log1p(-p))
    return min(max(value, 1), upper)


def sample_contract(rng: np.random.Generator, cfg: PortfolioConfig) -> Contract:
    """Draw one unpriced contract from the configured marginals."""
    year = int(rng.choice(cfg.years))
    month = int(rng.integers(1, 13))
    a0 = int(rng.integers(cfg.a0_min, cfg.a0_max + 1))
    S = round(float(rng.uniform(cfg.S_min, cfg.S_max)), 2)
    n = truncated_geometric(rng, cfg.n_geometric_p, cfg.n_max)
    t = truncated_geometric(rng, cfg.t_geometric_p, n)
    m = int(rng.choice(cfg.styles))
    gender = GENDERS[int(rng.integers(0, len(GENDERS)))]
    smoker = bool(rng.integers(0, 2))
    return Contract(year=year, month=month, a0=a0, n=n, t=t, S=S, m=m, gender=gender, smoker=smoker)


@dataclass
class Portfolio:
    """Priced contracts with the assumptions needed to rebuild their cash flows."""

    contracts: list[Contract]
    expenses: ExpenseStructure
    discount: DiscountFactor
    seed: int | None = None
    ground_truth: dict[str, Any] | None = None
    config: dict[str, Any] = field(default_factory=dict)
    _flows: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.contracts)

    def cash_flows(self) -> list[np.ndarray]:
        """Discounted cash-flow tensors, recomputed from the contracts on first use."""
        if self._flows is None:
            self._flows = [discounted_cash_flows(c, self.expenses, self.discount) for c in self.contracts]
        return self._flows

    def __iter__(self) -> Iterator[tuple[Contract, np.ndarray]]:
        return iter(zip(self.contracts, self.cash_flows(), strict=True))


def price_contract(contract: Contract, gt: GroundTruthModel, cfg: PortfolioConfig) -> Contract:
    premium = equivalence_premium(contract, gt.predict_sequence(contract), cfg.expenses, cfg.discount)
    return contract.with_premium(premium)


def generate_portfolio(cfg: PortfolioConfig, gt: GroundTruthModel) -> Portfolio:
    """Sample and price ``cfg.N`` contracts; every contract is APV-consistent under ``gt``.

    Contract i is drawn from its own substream (seed, i), so the output does
    not depend on evaluation order. Unpriceable draws are resampled from the
    same substream.

    Raises:
        NumericalError: if a contract stays unpriceable after ``cfg.max_resample`` redraws.
    """
    contracts = []
    resampled = 0
    for index in range(cfg.N):
        rng = contract_rng(cfg.seed, index)
        for attempt in range(cfg.max_resample + 1):
            try:
                contracts.append(price_contract(sample_contract(rng, cfg), gt, cfg))
                break
            except UnpriceableContractError as e:
                resampled += 1
                logger.warning(f"Contract {index} attempt {attempt + 1} unpriceable, resampling: {e}")
        else:
            raise NumericalError(f"contract {index} still unpriceable after {cfg.max_resample} resamples")

    logger.info(f"Generated {len(contracts)} contracts (seed {cfg.seed}, {resampled} resampled)")
    return Portfolio(
        contracts=contracts,
        expenses=cfg.expenses,
        discount=cfg.discount,
        seed=cfg.seed,
        ground_truth=gt.to_dict(),
        config=portfolio_config_to_dict(cfg),
    )


def portfolio_config_to_dict(cfg: PortfolioConfig) -> dict[str, Any]:
    data = asdict(cfg)
    data["years"] = list(cfg.years)
    data["styles"] = list(cfg.styles)
    return data


def _contract_row(contract: Contract) -> dict[str, Any]:
    return {
        "year": contract.year,
        "month": contract.month,
        "a0": contract.a0,
        "n": contract.n,
        "t": contract.t,
        "S": contract.S,
        "P": contract.P,
        "m": contract.m,
        "gender": contract.gender,
        "smoker": "yes" if contract.smoker else "no",
    }


def write_portfolio(portfolio: Portfolio, directory: Path, extra_metadata: dict[str, Any] | None = None) -> Path:
    """Write ``portfolio.csv`` and its ``portfolio.json`` sidecar into ``directory``.

    Returns:
        Path of the CSV file.
    """
    directory = Path(directory)
    frame = pd.DataFrame([_contract_row(c) for c in portfolio.contracts], columns=PORTFOLIO_COLUMNS)
    csv_path = directory / PORTFOLIO_FILE
    atomic_write_text(csv_path, frame.to_csv(index=False, lineterminator="\n"))

    metadata = {
        "N": len(portfolio),
        "seed": portfolio.seed,
        "ground_truth": portfolio.ground_truth,
        "expenses": asdict(portfolio.expenses),
        "discount": {"v": portfolio.discount.v},
        "config": portfolio.config,
        **(extra_metadata or {}),
    }
    atomic_write_json(directory / METADATA_FILE, metadata)
    logger.info(f"Wrote {len(portfolio)} contracts to {csv_path}")
    return csv_path


def _parse_row(record: Any, row: int) -> Contract:
    try:
        contract = Contract(
            year=int(record.year),
            month=int(record.month),
            a0=int(record.a0),
            n=int(record.n),
            t=int(record.t),
            S=float(record.S),
            m=int(record.m),
            gender=record.gender,
            smoker={"yes": True, "no": False}[record.smoker],
            P=float(record.P) if record.P != "" else None,
        )
    except KeyError as e:
        raise SchemaError(f"smoker must be 'yes' or 'no', got '{record.smoker}'", row=row) from e
    except ValueError as e:
        raise SchemaError(f"malformed value: {e}", row=row) from e
    errors = contract.validate()
    if errors:
        raise SchemaError("; ".join(errors), row=row)
    return contract


def read_portfolio(path: Path) -> Portfolio:
    """Read a portfolio directory (or its CSV file) together with the sidecar.

    Raises:
        InputError: if the CSV or the sidecar is missing.
        SchemaError: on a malformed row.
    """
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    csv_path = directory / PORTFOLIO_FILE if path.is_dir() else path
    if not csv_path.exists():
        raise InputError(f"Portfolio not found: {csv_path}")
    metadata = read_json(directory / METADATA_FILE)

    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    if list(frame.columns) != PORTFOLIO_COLUMNS:
        raise SchemaError(f"header must be '{','.join(PORTFOLIO_COLUMNS)}', got '{','.join(frame.columns)}'", row=1)
    contracts = [_parse_row(record, index + 2) for index, record in enumerate(frame.itertuples(index=False))]
    if not contracts:
        raise SchemaError("portfolio has no contracts")

    portfolio = Portfolio(
        contracts=contracts,
        expenses=ExpenseStructure(**metadata["expenses"]),
        discount=DiscountFactor(v=metadata["discount"]["v"]),
        seed=metadata.get("seed"),
        ground_truth=metadata.get("ground_truth"),
        config=metadata.get("config", {}),
    )
    logger.info(f"Read {len(portfolio)} contracts from {csv_path}")
    return portfolio
