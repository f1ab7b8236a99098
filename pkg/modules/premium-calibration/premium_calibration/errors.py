"""Exception hierarchy shared by the calibration engine and its CLI."""


class CalibrationError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class InputError(CalibrationError):
    """Bad configuration, missing file or unusable input data."""

    exit_code = 2


class SchemaError(InputError):
    """A CSV input violates its declared schema."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(CalibrationError):
    """Training or valuation produced a non-finite or meaningless number."""

    exit_code = 3


class UnpriceableContractError(NumericalError):
    """Expense loadings exceed the expected premium income of a contract."""


class ConsistencyError(CalibrationError):
    """Artifacts do not belong together (e.g. checkpoint vs portfolio)."""

    exit_code = 4


class ShapeError(ValueError):
    """Tensor operands do not conform."""
