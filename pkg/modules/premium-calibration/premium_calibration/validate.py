"""Premium backtest and diagnostic analyses of calibrated transition probabilities."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .actuarial import ALIVE
from .actuarial import DEAD
from .actuarial import GENDERS
from .actuarial import PAYMENT_STYLES
from .actuarial import Contract
from .actuarial import DiscountFactor
from .actuarial import ExpenseStructure
from .actuarial import TransitionModel
from .actuarial import TransitionSequence
from .actuarial import equivalence_premium
from .errors import UnpriceableContractError
from .mortality import MortalityTable
from .portfolio import Portfolio
from .runs import atomic_write_text

logger = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.0, 0.005, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.995, 1.0)
DECOMPOSITION_FEATURES = ("a0", "P", "S", "t", "m")
TARGET_SHARE = 0.80
TARGET_BAND = 0.05
TARGET_MEDIAN = 0.02
BACKTEST_COLUMNS = ["contract", "P", "P_hat", "e_rel", "a0", "n", "t", "S", "m", "gender", "smoker"]


def predict_all(model: TransitionModel, contracts: Sequence[Contract]) -> list[TransitionSequence]:
    """Sequences for every contract, batched when the model supports it."""
    batched = getattr(model, "predict_sequences", None)
    if batched is not None:
        return batched(contracts)
    return [model.predict_sequence(c) for c in contracts]


def error_quantiles(errors: np.ndarray, levels: Sequence[float] = QUANTILE_LEVELS) -> dict[float, float]:
    """Quantiles by linear interpolation between closest ranks; q_0 = min, q_1 = max."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return {alpha: math.nan for alpha in levels}
    values = np.quantile(errors, levels, method="linear")
    return {alpha: float(value) for alpha, value in zip(levels, values, strict=True)}


@dataclass
class BacktestReport:
    """Per-contract premium estimates and relative errors (P - P_hat) / P."""

    results: pd.DataFrame
    excluded: int  # contracts with P = 0
    unpriceable: int  # contracts the model cannot price
    quantiles: dict[float, float]

    @property
    def errors(self) -> np.ndarray:
        values = self.results["e_rel"].to_numpy()
        return values[np.isfinite(values)]

    def share_within(self, band: float = TARGET_BAND) -> float:
        errors = self.errors
        return float(np.mean(np.abs(errors) <= band)) if errors.size else math.nan

    def median_abs_error(self) -> float:
        errors = self.errors
        return float(np.median(np.abs(errors))) if errors.size else math.nan

    def meets_targets(self) -> bool:
        return self.share_within() >= TARGET_SHARE and self.median_abs_error() <= TARGET_MEDIAN

    def quantile_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "alpha": list(self.quantiles),
                "q_alpha": list(self.quantiles.values()),
                "q_alpha_pct": [100.0 * q for q in self.quantiles.values()],
            }
        )

    def quantile_row(self) -> str:
        """Two aligned lines: the alpha levels and q_alpha in percent."""
        alphas = "".join(f"{alpha:>9.3f}" for alpha in self.quantiles)
        values = "".join(f"{100.0 * q:>9.2f}" for q in self.quantiles.values())
        return f"alpha    {alphas}\nq_alpha %{values}"


def backtest_portfolio(
    model: TransitionModel,
    portfolio: Portfolio,
    expenses: ExpenseStructure | None = None,
    discount: DiscountFactor | None = None,
) -> BacktestReport:
    """Recompute every premium from the model's probabilities and compare with the recorded one.

    Contracts with P = 0 are excluded and counted. Contracts the model cannot
    price get NaN and are left out of the quantiles.
    """
    expenses = expenses or portfolio.expenses
    discount = discount or portfolio.discount
    priced = [(index, c) for index, c in enumerate(portfolio.contracts) if c.P]
    excluded = len(portfolio) - len(priced)
    if excluded:
        logger.warning(f"Excluded {excluded} contracts with zero premium from the backtest")

    sequences = predict_all(model, [c for _, c in priced])
    rows = []
    unpriceable = 0
    for (index, contract), seq in zip(priced, sequences, strict=True):
        try:
            estimate = equivalence_premium(contract, seq, expenses, discount)
        except UnpriceableContractError as e:
            unpriceable += 1
            logger.debug(f"Contract {index} not priceable under the model: {e}")
            estimate = math.nan
        rows.append(
            {
                "contract": index,
                "P": contract.P,
                "P_hat": estimate,
                "e_rel": (contract.P - estimate) / contract.P,
                "a0": contract.a0,
                "n": contract.n,
                "t": contract.t,
                "S": contract.S,
                "m": contract.m,
                "gender": contract.gender,
                "smoker": contract.smoker,
            }
        )
    if unpriceable:
        logger.warning(f"{unpriceable} contracts could not be priced under the model")

    results = pd.DataFrame(rows, columns=BACKTEST_COLUMNS)
    report = BacktestReport(results=results, excluded=excluded, unpriceable=unpriceable, quantiles={})
    report.quantiles = error_quantiles(report.errors)
    logger.info(
        f"Backtest of {len(results)} contracts: {100 * report.share_within():.1f}% within "
        f"{100 * TARGET_BAND:.0f}%, median |e_rel| {100 * report.median_abs_error():.3f}%"
    )
    return report


@dataclass
class MortalityCurve:
    """Implied one-year death probability over ages for one (gender, smoker) profile."""

    gender: str
    smoker: bool
    ages: np.ndarray
    values: np.ndarray
    reference: np.ndarray | None = None

    @property
    def label(self) -> str:
        return f"{self.gender}/{'smoker' if self.smoker else 'non-smoker'}"


def reference_contract(a0: int, gender: str, smoker: bool, m: int = 1, n: int = 1) -> Contract:
    """Unpriced contract used only to query a model's transition probabilities."""
    return Contract(year=2015, month=1, a0=a0, n=n, t=1, S=1.0, m=m, gender=gender, smoker=smoker)


def implied_mortality(
    model: TransitionModel,
    ages: Sequence[int],
    profiles: Sequence[tuple[str, bool]] | None = None,
    reference: MortalityTable | None = None,
) -> list[MortalityCurve]:
    """pi_01 at k = 0 and m = 1 per age and profile, with the table curve for comparison."""
    ages = np.asarray(list(ages), dtype=np.int64)
    profiles = profiles or [(g, s) for g in GENDERS for s in (False, True)]
    curves = []
    for gender, smoker in profiles:
        sequences = predict_all(model, [reference_contract(int(a), gender, smoker) for a in ages])
        values = np.array([seq[0, ALIVE, DEAD] for seq in sequences])
        table_curve = reference.q(gender)[reference.clamp_ages(ages)] if reference is not None else None
        curves.append(MortalityCurve(gender=gender, smoker=smoker, ages=ages, values=values, reference=table_curve))
    return curves


def curves_frame(curves: Sequence[MortalityCurve]) -> pd.DataFrame:
    frames = [
        pd.DataFrame(
            {
                "age": curve.ages,
                "gender": curve.gender,
                "smoker": "yes" if curve.smoker else "no",
                "implied": curve.values,
                "reference": curve.reference if curve.reference is not None else np.nan,
            }
        )
        for curve in curves
    ]
    return pd.concat(frames, ignore_index=True)


@dataclass
class HomogeneityGrid:
    """Single-step death-probability differences between two profiles, rows a0, columns k."""

    feature: str
    a0: np.ndarray
    m: int
    values: np.ndarray  # (len(a0), steps)

    def current_age_keys(self) -> np.ndarray:
        # a0*m + k is constant exactly where the current age a0 + k/m is
        steps = self.values.shape[1]
        return self.a0[:, None] * self.m + np.arange(steps)[None, :]

    def score(self) -> float:
        """Largest spread of the differences along any line of constant current age."""
        frame = pd.DataFrame({"key": self.current_age_keys().ravel(), "value": self.values.ravel()})
        spread = frame.groupby("key")["value"].agg(lambda v: v.max() - v.min())
        return float(spread.max())

    def to_frame(self) -> pd.DataFrame:
        steps = self.values.shape[1]
        a0, k = np.meshgrid(self.a0, np.arange(steps), indexing="ij")
        return pd.DataFrame(
            {
                "feature": self.feature,
                "a0": a0.ravel(),
                "k": k.ravel(),
                "current_age": (a0 + k / self.m).ravel(),
                "difference": self.values.ravel(),
            }
        )


# (profile, other profile) compared per feature
FEATURE_PAIRS = {
    "smoker": (("male", True), ("male", False)),
    "gender": (("female", False), ("male", False)),
}


def homogeneity_grid(
    model: TransitionModel,
    a0_range: Sequence[int],
    feature: str,
    steps: int = 20,
    m: int = 1,
) -> HomogeneityGrid:
    """pi_01^(k)(c) - pi_01^(k)(c') over a0 x k for contracts c, c' differing only in ``feature``."""
    if feature not in FEATURE_PAIRS:
        raise ValueError(f"feature must be one of {sorted(FEATURE_PAIRS)}, got '{feature}'")
    a0 = np.arange(a0_range[0], a0_range[1] + 1)
    n = math.ceil(steps / m)
    (gender, smoker), (other_gender, other_smoker) = FEATURE_PAIRS[feature]
    first = predict_all(model, [reference_contract(int(a), gender, smoker, m=m, n=n) for a in a0])
    second = predict_all(model, [reference_contract(int(a), other_gender, other_smoker, m=m, n=n) for a in a0])
    values = np.array(
        [s1[:steps, ALIVE, DEAD] - s2[:steps, ALIVE, DEAD] for s1, s2 in zip(first, second, strict=True)]
    )
    return HomogeneityGrid(feature=feature, a0=a0, m=m, values=values)


def error_decomposition(
    report: BacktestReport,
    features: Sequence[str] = DECOMPOSITION_FEATURES,
    bins: int = 10,
) -> pd.DataFrame:
    """Binned mean, std and mean |e_rel| per feature.

    Numeric features use equal-width bins over their range, m uses its
    levels. Every priced contract lands in exactly one bin per feature;
    empty bins are kept with count 0.
    """
    results = report.results[np.isfinite(report.results["e_rel"])]
    frames = []
    for feature in features:
        values = results[feature]
        if feature == "m":
            groups = pd.Categorical(values, categories=list(PAYMENT_STYLES))
            lower = upper = [float(level) for level in PAYMENT_STYLES]
        else:
            low, high = (float(values.min()), float(values.max())) if len(values) else (0.0, 1.0)
            if high == low:
                high = low + 1.0
            edges = np.linspace(low, high, bins + 1)
            groups = pd.cut(values, edges, include_lowest=True)
            lower, upper = edges[:-1].tolist(), edges[1:].tolist()
        grouped = results["e_rel"].groupby(groups, observed=False)
        stats = pd.DataFrame(
            {
                "feature": feature,
                "bin": [str(label) for label in grouped.size().index],
                "lower": lower,
                "upper": upper,
                "count": grouped.size().to_numpy(),
                "mean": grouped.mean().to_numpy(),
                "std": grouped.std().to_numpy(),
                "mean_abs": results["e_rel"].abs().groupby(groups, observed=False).mean().to_numpy(),
            }
        )
        frames.append(stats)
    return pd.concat(frames, ignore_index=True)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _write_frame(path: Path, frame: pd.DataFrame) -> Path:
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))
    return path


def write_backtest(report: BacktestReport, directory: Path) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "backtest": _write_frame(directory / "backtest.csv", report.results[["contract", "P", "P_hat", "e_rel"]]),
        "quantiles": _write_frame(directory / "quantiles.csv", report.quantile_frame()),
    }


def write_curves(curves: Sequence[MortalityCurve], directory: Path) -> Path:
    return _write_frame(Path(directory) / "curves.csv", curves_frame(curves))


def write_homogeneity(grids: Sequence[HomogeneityGrid], directory: Path) -> Path:
    frame = pd.concat([g.to_frame() for g in grids], ignore_index=True)
    return _write_frame(Path(directory) / "homogeneity.csv", frame)


def write_decomposition(decomposition: pd.DataFrame, directory: Path) -> Path:
    return _write_frame(Path(directory) / "decomposition.csv", decomposition)


def diagnose(report: BacktestReport, decomposition: pd.DataFrame | None, history: dict[str, Any] | None) -> str:
    """Paragraph explaining a missed accuracy target."""
    lines = [
        f"Targets missed: {100 * report.share_within():.1f}% of contracts within +/-{100 * TARGET_BAND:.0f}% "
        f"(target {100 * TARGET_SHARE:.0f}%), median |e_rel| {100 * report.median_abs_error():.2f}% "
        f"(target {100 * TARGET_MEDIAN:.0f}%)."
    ]
    if decomposition is not None and decomposition["count"].sum() > 0:
        filled = decomposition[decomposition["count"] > 0]
        worst = filled.loc[filled["mean_abs"].idxmax()]
        lines.append(
            f"The largest mean |e_rel| ({100 * worst['mean_abs']:.2f}%) is in {worst['feature']} bin {worst['bin']} "
            f"with {int(worst['count'])} contracts."
        )
    if history:
        if history.get("stopped_early"):
            lines.append(f"Training stopped early; best epoch {history.get('best_epoch')}.")
        else:
            lines.append(f"Training used all {history.get('epochs')} epochs; a larger epoch budget may help.")
    if report.unpriceable:
        lines.append(f"{report.unpriceable} contracts were not priceable under the calibrated probabilities.")
    return " ".join(lines)


def summary_text(
    report: BacktestReport,
    homogeneity: dict[str, float] | None = None,
    decomposition: pd.DataFrame | None = None,
    history: dict[str, Any] | None = None,
    title: str = "Premium backtest",
) -> str:
    lines = [
        title,
        "=" * len(title),
        "",
        f"contracts backtested: {len(report.results)}",
        f"excluded (P = 0):     {report.excluded}",
        f"unpriceable:          {report.unpriceable}",
        "",
        "Quantiles of relative errors [in %]",
        report.quantile_row(),
        "",
        f"share with |e_rel| <= {100 * TARGET_BAND:.0f}%: {100 * report.share_within():.2f}%",
        f"median |e_rel|:          {100 * report.median_abs_error():.4f}%",
    ]
    if homogeneity:
        lines.append("")
        for feature, score in homogeneity.items():
            lines.append(f"homogeneity score ({feature}): {score:.3e}")
    if not report.meets_targets():
        lines.extend(["", "Diagnosis", "---------", diagnose(report, decomposition, history)])
    return "\n".join(lines) + "\n"


def write_summary(text: str, directory: Path) -> Path:
    path = Path(directory) / "summary.txt"
    atomic_write_text(path, text)
    return path
