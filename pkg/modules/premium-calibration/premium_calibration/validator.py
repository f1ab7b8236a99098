"""Run configuration validation."""

import logging
from dataclasses import dataclass

from .config import RunConfig
from .errors import InputError

logger = logging.getLogger(__name__)

# Longest contract beyond which a desk-scale residual run gets slow
LONG_SEQUENCE_YEARS = 20


@dataclass
class ValidationResult:
    """Result of run configuration validation."""

    is_valid: bool
    errors: list[str]
    warnings: list[str]


def validate_run_config(config: RunConfig) -> ValidationResult:
    """
    Comprehensive run configuration validation.

    Args:
        config: Run configuration to validate

    Returns:
        ValidationResult with errors and warnings
    """
    errors = config.validate()
    warnings = []

    if config.residual.loss_exponent > 1:
        warnings.append(
            f"residual.loss_exponent={config.residual.loss_exponent}: powers above 1 amplify large "
            "cash-flow mismatches and can make training unstable"
        )
    if config.portfolio.N < config.residual.batch_size:
        warnings.append(
            f"portfolio.N={config.portfolio.N} is smaller than residual.batch_size={config.residual.batch_size}"
        )
    if config.portfolio.n_max > LONG_SEQUENCE_YEARS and max(config.portfolio.styles, default=1) == 12:
        warnings.append(
            f"portfolio.n_max={config.portfolio.n_max} with monthly payments gives sequences of up to "
            f"{config.portfolio.n_max * 12} steps; residual training will be slow"
        )
    if "fit-residual" in config.stages and "fit-baseline" not in config.stages:
        warnings.append("stages include fit-residual without fit-baseline; an existing baseline checkpoint is needed")

    return ValidationResult(is_valid=not errors, errors=errors, warnings=warnings)


def require_valid(config: RunConfig) -> ValidationResult:
    """Validate and raise on errors; warnings are logged.

    Raises:
        InputError: listing every validation error.
    """
    result = validate_run_config(config)
    for warning in result.warnings:
        logger.warning(warning)
    if not result.is_valid:
        raise InputError("Invalid configuration:\n  " + "\n  ".join(result.errors))
    return result
