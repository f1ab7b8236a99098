"""Run configuration data models and YAML parsing."""

from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from pathlib import Path
from typing import Any

import yaml

from .actuarial import GENDERS
from .actuarial import PAYMENT_STYLES
from .actuarial import DiscountFactor
from .actuarial import ExpenseStructure
from .errors import InputError
from .portfolio import PortfolioConfig

STAGES = ("gen-table", "gen-portfolio", "fit-baseline", "fit-residual", "backtest", "report")
DEFAULT_STAGES = ["gen-portfolio", "fit-baseline", "fit-residual", "report"]

# Residual learning rates by baseline gender
RESIDUAL_LR = {"male": 0.005, "female": 0.001}


@dataclass
class PathsConfig:
    """File locations. A missing table means the bundled synthetic table."""

    table: str | None = None
    runs_dir: str = "runs"

    def validate(self) -> list[str]:
        errors = []
        if self.table is not None and not Path(self.table).exists():
            errors.append(f"paths.table does not exist: {self.table}")
        if not self.runs_dir:
            errors.append("paths.runs_dir must not be empty")
        return errors


@dataclass
class PortfolioSection:
    """Portfolio size and feature marginals (see PortfolioConfig)."""

    N: int = 10_000
    a0_min: int = 18
    a0_max: int = 60
    n_max: int = 48
    S_min: float = 1_000.0
    S_max: float = 1_000_000.0
    styles: list[int] = field(default_factory=lambda: list(PAYMENT_STYLES))
    max_resample: int = 100


@dataclass
class GroundTruthConfig:
    """Hidden mortality model used to price the synthetic portfolio."""

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


@dataclass
class AssumptionsConfig:
    """Expense loadings and the annual discount factor."""

    alpha: float = 0.025
    beta: float = 0.03
    gamma1: float = 0.001
    gamma2: float = 0.001
    v: float = 1 / 1.0125

    @property
    def expenses(self) -> ExpenseStructure:
        return ExpenseStructure(alpha=self.alpha, beta=self.beta, gamma1=self.gamma1, gamma2=self.gamma2)

    @property
    def discount(self) -> DiscountFactor:
        return DiscountFactor(v=self.v)

    def validate(self) -> list[str]:
        return self.expenses.validate() + self.discount.validate()


@dataclass
class BaselineConfig:
    """Stage-1 hyperparameters: feed-forward net fitted to the table."""

    gender: str = "male"
    widths: list[int] = field(default_factory=lambda: [2, 40, 40, 20, 2])
    batch_size: int = 32
    lr: float = 0.001
    max_epochs: int = 5000
    tolerance: float = 0.10  # max relative error of the death probability
    tolerance_ages: list[int] = field(default_factory=lambda: [18, 66])
    check_every: int = 10
    log_every: int = 100

    def validate(self) -> list[str]:
        errors = []
        if self.gender not in GENDERS:
            errors.append(f"baseline.gender must be 'male' or 'female', got '{self.gender}'")
        errors.extend(_check_widths("baseline.widths", self.widths, n_in=2, minimum_layers=2))
        errors.extend(_check_positive("baseline", self, ("batch_size", "lr", "max_epochs", "tolerance", "check_every")))
        if len(self.tolerance_ages) != 2 or self.tolerance_ages[0] > self.tolerance_ages[1]:
            errors.append(f"baseline.tolerance_ages must be [low, high], got {self.tolerance_ages}")
        return errors


@dataclass
class ResidualConfig:
    """Stage-2 hyperparameters: residual GRU net trained on the premium loss."""

    widths: list[int] = field(default_factory=lambda: [4, 50, 50, 50, 50, 50, 2])
    batch_size: int = 32
    lr: float | None = None  # None: 0.005 for a male baseline, 0.001 for a female one
    warmup: int = 50
    decay_every: int = 15
    decay_factor: float = 0.9
    clip_norm: float = 100.0
    patience: int = 50
    max_epochs: int = 1000
    loss_exponent: float = 1.0
    zero_output: bool = True
    log_every: int = 10

    def learning_rate(self, gender: str) -> float:
        return self.lr if self.lr is not None else RESIDUAL_LR[gender]

    def validate(self) -> list[str]:
        errors = []
        errors.extend(_check_widths("residual.widths", self.widths, n_in=4, minimum_layers=3))
        errors.extend(
            _check_positive(
                "residual", self, ("batch_size", "decay_every", "decay_factor", "clip_norm", "patience", "max_epochs")
            )
        )
        if self.lr is not None and not self.lr > 0:
            errors.append(f"residual.lr must be positive, got {self.lr}")
        if self.warmup < 0:
            errors.append(f"residual.warmup must be non-negative, got {self.warmup}")
        if self.loss_exponent < 1:
            errors.append(f"residual.loss_exponent must be >= 1, got {self.loss_exponent}")
        return errors


@dataclass
class ReportConfig:
    """Grids and bins of the diagnostic reports."""

    ages: list[int] = field(default_factory=lambda: [18, 80])
    homogeneity_a0: list[int] = field(default_factory=lambda: [20, 60])
    homogeneity_steps: int = 20
    homogeneity_pairs: list[str] = field(default_factory=lambda: ["smoker", "gender"])
    bins: int = 10
    oracle: bool = False

    def validate(self) -> list[str]:
        errors = []
        for name in ("ages", "homogeneity_a0"):
            value = getattr(self, name)
            if len(value) != 2 or not 0 <= value[0] <= value[1]:
                errors.append(f"report.{name} must be [low, high] with 0 <= low <= high, got {value}")
        if self.homogeneity_steps < 1:
            errors.append(f"report.homogeneity_steps must be at least 1, got {self.homogeneity_steps}")
        unknown = set(self.homogeneity_pairs) - {"smoker", "gender"}
        if unknown:
            errors.append(f"report.homogeneity_pairs must name 'smoker' or 'gender', got {sorted(unknown)}")
        if self.bins < 1:
            errors.append(f"report.bins must be at least 1, got {self.bins}")
        return errors


def _check_widths(name: str, widths: list[int], n_in: int, minimum_layers: int) -> list[str]:
    errors = []
    if len(widths) < minimum_layers + 1:
        errors.append(f"{name} needs at least {minimum_layers + 1} entries, got {widths}")
    if any(not isinstance(w, int) or w <= 0 for w in widths):
        errors.append(f"{name} must be positive integers, got {widths}")
    elif widths and (widths[0] != n_in or widths[-1] != 2):
        errors.append(f"{name} must start with {n_in} inputs and end with 2 outputs, got {widths}")
    return errors


def _check_positive(section: str, config: Any, names: tuple[str, ...]) -> list[str]:
    return [
        f"{section}.{name} must be positive, got {getattr(config, name)}"
        for name in names
        if not getattr(config, name) > 0
    ]


SECTIONS: dict[str, type] = {
    "paths": PathsConfig,
    "portfolio": PortfolioSection,
    "ground_truth": GroundTruthConfig,
    "assumptions": AssumptionsConfig,
    "baseline": BaselineConfig,
    "residual": ResidualConfig,
    "report": ReportConfig,
}


@dataclass
class RunConfig:
    """Complete configuration of a calibration run."""

    name: str = "calibration"
    paths: PathsConfig = field(default_factory=PathsConfig)
    portfolio: PortfolioSection = field(default_factory=PortfolioSection)
    ground_truth: GroundTruthConfig = field(default_factory=GroundTruthConfig)
    assumptions: AssumptionsConfig = field(default_factory=AssumptionsConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    seed: int = 42
    stages: list[str] = field(default_factory=lambda: list(DEFAULT_STAGES))
    unknown_keys: list[str] = field(default_factory=list, repr=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = []
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in SECTIONS:
                if value is None:
                    continue
                if not isinstance(value, dict):
                    raise InputError(f"config section '{key}' must be a mapping")
                section = SECTIONS[key]
                known = {f.name for f in fields(section)}
                unknown.extend(f"{key}.{name}" for name in value if name not in known)
                kwargs[key] = section(**{name: v for name, v in value.items() if name in known})
            elif key in ("name", "seed", "stages"):
                kwargs[key] = value
            else:
                unknown.append(key)
        return cls(**kwargs, unknown_keys=unknown)

    @classmethod
    def from_yaml(cls, path: Path) -> "RunConfig":
        """Load a run configuration from YAML.

        Raises:
            InputError: if the file is missing or not a YAML mapping.
        """
        path = Path(path)
        if not path.exists():
            raise InputError(f"Config file not found: {path}")

        with open(path, encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise InputError(f"Invalid YAML in {path}: {e}") from e

        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise InputError("Config YAML must be a mapping")
        return cls.from_dict(data)

    def portfolio_config(self) -> PortfolioConfig:
        section = self.portfolio
        return PortfolioConfig(
            N=section.N,
            seed=self.seed,
            a0_min=section.a0_min,
            a0_max=section.a0_max,
            n_max=section.n_max,
            S_min=section.S_min,
            S_max=section.S_max,
            styles=tuple(section.styles),
            expenses=self.assumptions.expenses,
            discount=self.assumptions.discount,
            max_resample=section.max_resample,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("unknown_keys")
        return data

    def validate(self) -> list[str]:
        """Validate every section and the stage list."""
        errors = [f"unknown config key: {key}" for key in self.unknown_keys]
        for name in SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                errors.extend(section.validate())
        errors.extend(self.portfolio_config().validate())
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append(f"seed must be a non-negative integer, got {self.seed}")
        for stage in self.stages:
            if stage not in STAGES:
                errors.append(f"unknown stage '{stage}', expected one of {list(STAGES)}")
        # assumptions are checked both directly and through the portfolio config
        return list(dict.fromkeys(errors))
