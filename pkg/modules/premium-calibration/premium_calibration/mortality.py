"""Annual mortality tables, sub-annual one-step matrices and the table training set."""

import logging
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import pandas as pd

from .actuarial import GENDERS
from .actuarial import PAYMENT_STYLES
from .actuarial import TransitionMatrix
from .actuarial import transition_matrix
from .actuarial import transition_sequence
from .errors import InputError
from .errors import SchemaError
from .nn import MinMaxScaler
from .runs import atomic_write_text

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["age", "q_male", "q_female"]
A_MAX = 121

# Gompertz-Makeham constants of the bundled synthetic table: q(a) = min(1, A + B * c**a).
# Shaped like a German first-order term-life table but NOT an official table.
SYNTHETIC_CONSTANTS = {
    "male": {"A": 0.0005, "B": 0.00003, "c": 1.1},
    "female": {"A": 0.0003, "B": 0.000015, "c": 1.1},
}


@dataclass
class MortalityTable:
    """Annual death probabilities per integer age 0..a_max and gender."""

    q_male: np.ndarray
    q_female: np.ndarray
    name: str = "table"
    _clamp_logged: bool = field(default=False, repr=False, compare=False)

    @property
    def a_max(self) -> int:
        return len(self.q_male) - 1

    def q(self, gender: str) -> np.ndarray:
        """Full column of annual death probabilities for one gender."""
        if gender == "male":
            return self.q_male
        if gender == "female":
            return self.q_female
        raise ValueError(f"gender must be 'male' or 'female', got '{gender}'")

    def q_blend(self) -> np.ndarray:
        """Unisex column: 50/50 blend of the male and female columns."""
        return 0.5 * (self.q_male + self.q_female)

    def clamp_ages(self, ages: np.ndarray) -> np.ndarray:
        """Clamp ages beyond a_max to a_max, logging the first occurrence only."""
        ages = np.asarray(ages, dtype=np.int64)
        if np.any(ages > self.a_max) and not self._clamp_logged:
            logger.warning(f"Ages above a_max={self.a_max} requested from '{self.name}'; clamping to a_max")
            self._clamp_logged = True
        return np.minimum(ages, self.a_max)

    def q_at(self, age: int, gender: str) -> float:
        return float(self.q(gender)[self.clamp_ages(np.array([age]))[0]])


@dataclass
class TableDataset:
    """Table training set for one gender: inputs (age, m) and target matrices."""

    gender: str
    ages: np.ndarray
    styles: np.ndarray
    features: np.ndarray  # min-max scaled (age, m), shape (N, 2)
    targets: np.ndarray  # shape (N, 2, 2)
    scaler: MinMaxScaler

    def __len__(self) -> int:
        return len(self.ages)


def load_table(path: Path, name: str | None = None) -> MortalityTable:
    """Load a mortality table CSV with header ``age,q_male,q_female``.

    Raises:
        InputError: if the file does not exist.
        SchemaError: on a wrong header, duplicate or missing age, or a value
            that is not a probability. Row numbers count the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"Mortality table not found: {path}")

    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != TABLE_COLUMNS:
        raise SchemaError(f"header must be '{','.join(TABLE_COLUMNS)}', got '{','.join(frame.columns)}'", row=1)

    seen: dict[int, int] = {}
    for index, record in enumerate(frame.itertuples(index=False)):
        row = index + 2
        try:
            age = int(record.age)
        except ValueError as e:
            raise SchemaError(f"age '{record.age}' is not an integer", row=row) from e
        if age < 0:
            raise SchemaError(f"age {age} is negative", row=row)
        if age in seen:
            raise SchemaError(f"duplicate age {age} (first seen in row {seen[age]})", row=row)
        seen[age] = row
        for column in ("q_male", "q_female"):
            raw = getattr(record, column)
            try:
                value = float(raw)
            except ValueError as e:
                raise SchemaError(f"{column} '{raw}' is not a number", row=row) from e
            if not 0.0 <= value <= 1.0:
                raise SchemaError(f"{column}={value}: probability out of range", row=row)

    if not seen:
        raise SchemaError("table has no rows")
    a_max = max(max(seen), A_MAX)
    missing = sorted(set(range(a_max + 1)) - set(seen))
    if missing:
        more = f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""
        raise SchemaError(f"missing age {missing[0]}{more}")

    frame = frame.astype({"age": np.int64, "q_male": np.float64, "q_female": np.float64}).sort_values("age")
    table = MortalityTable(
        q_male=frame["q_male"].to_numpy(),
        q_female=frame["q_female"].to_numpy(),
        name=name or path.stem,
    )
    logger.info(f"Loaded mortality table '{table.name}' with ages 0..{table.a_max}")
    return table


def write_table(table: MortalityTable, path: Path) -> None:
    """Write a table in the CSV schema read by ``load_table``."""
    frame = pd.DataFrame(
        {"age": np.arange(table.a_max + 1), "q_male": table.q_male, "q_female": table.q_female},
        columns=TABLE_COLUMNS,
    )
    atomic_write_text(Path(path), frame.to_csv(index=False, lineterminator="\n"))


def synthetic_table(a_max: int = A_MAX) -> MortalityTable:
    """Gompertz-Makeham shaped table for tests and demos (not an official table)."""
    ages = np.arange(a_max + 1, dtype=np.float64)
    columns = {}
    for gender in GENDERS:
        const = SYNTHETIC_CONSTANTS[gender]
        columns[gender] = np.minimum(1.0, const["A"] + const["B"] * const["c"] ** ages)
    return MortalityTable(q_male=columns["male"], q_female=columns["female"], name="synthetic-gompertz-makeham")


def subannual_matrix(table: MortalityTable, age: int, m: int, gender: str) -> TransitionMatrix:
    """One-step matrix for payment style m under uniformly distributed deaths."""
    if m not in PAYMENT_STYLES:
        raise ValueError(f"m must be one of {PAYMENT_STYLES}, got {m}")
    return transition_matrix(table.q_at(age, gender) / m)


def build_dav_dataset(table: MortalityTable, gender: str) -> TableDataset:
    """Enumerate every (age, m) in {0..a_max} x {1, 2, 4, 12} with its sub-annual matrix."""
    ages, styles = np.meshgrid(np.arange(table.a_max + 1), np.array(PAYMENT_STYLES), indexing="ij")
    ages = ages.ravel()
    styles = styles.ravel()
    targets = transition_sequence(table.q(gender)[ages] / styles)

    raw = np.column_stack([ages, styles]).astype(np.float64)
    scaler = MinMaxScaler.fit(raw, names=["age", "m"])
    return TableDataset(
        gender=gender,
        ages=ages,
        styles=styles,
        features=scaler.apply(raw),
        targets=targets,
        scaler=scaler,
    )
