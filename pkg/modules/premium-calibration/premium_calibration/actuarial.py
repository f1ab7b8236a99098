"""Valuation mathematics for term-life contracts on a two-state Markov chain.

States are 0 = alive and 1 = dead; state 1 is absorbing and carries no cash
flows. Iteration k of a contract with payment style m sits k/m years after
inception; a contract runs for K = n*m iterations.
"""

import dataclasses
from dataclasses import dataclass
from typing import Literal
from typing import Protocol

import numpy as np

from .errors import UnpriceableContractError

ALIVE = 0
DEAD = 1
GENDERS = ("male", "female")
PAYMENT_STYLES = (1, 2, 4, 12)

# A TransitionMatrix is a (2, 2) float array; a TransitionSequence stacks K of them as (K, 2, 2).
TransitionMatrix = np.ndarray
TransitionSequence = np.ndarray


@dataclass(frozen=True)
class Contract:
    """One term-life policy. ``P`` is None until the contract is priced."""

    year: int
    month: int
    a0: int
    n: int
    t: int
    S: float
    m: int
    gender: Literal["male", "female"]
    smoker: bool
    P: float | None = None

    @property
    def iterations(self) -> int:
        """Total number of Markov steps K = n*m."""
        return self.n * self.m

    @property
    def premium_iterations(self) -> int:
        """Number of premium-paying iterations t*m (k in 0..t*m-1)."""
        return self.t * self.m

    def with_premium(self, premium: float | None) -> "Contract":
        return dataclasses.replace(self, P=premium)

    def validate(self) -> list[str]:
        """Validate contract invariants."""
        errors = []
        if self.m not in PAYMENT_STYLES:
            errors.append(f"m must be one of {PAYMENT_STYLES}, got {self.m}")
        if not 1 <= self.t <= self.n:
            errors.append(f"premium duration t must satisfy 1 <= t <= n, got t={self.t}, n={self.n}")
        if self.a0 < 0:
            errors.append(f"a0 must be non-negative, got {self.a0}")
        if not self.S > 0:
            errors.append(f"sum insured S must be positive, got {self.S}")
        if self.P is not None and not self.P >= 0:
            errors.append(f"premium P must be non-negative, got {self.P}")
        if not 1 <= self.month <= 12:
            errors.append(f"month must be 1-12, got {self.month}")
        if self.gender not in GENDERS:
            errors.append(f"gender must be 'male' or 'female', got '{self.gender}'")
        return errors


@dataclass(frozen=True)
class ExpenseStructure:
    """Acquisition (alpha), collection (beta) and administration (gamma1, gamma2) loadings."""

    alpha: float = 0.025
    beta: float = 0.03
    gamma1: float = 0.001
    gamma2: float = 0.001

    def validate(self) -> list[str]:
        errors = []
        for name in ("alpha", "beta", "gamma1", "gamma2"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                errors.append(f"expenses.{name} must be in [0, 1), got {value}")
        return errors

    def admits(self, contract: Contract) -> bool:
        """True if alpha*t + beta < 1 for the contract's premium duration."""
        return self.alpha * contract.t + self.beta < 1


@dataclass(frozen=True)
class DiscountFactor:
    """Annual discount factor v in (0, 1]."""

    v: float = 1 / 1.0125

    @classmethod
    def from_interest_rate(cls, rate: float) -> "DiscountFactor":
        return cls(v=1.0 / (1.0 + rate))

    def validate(self) -> list[str]:
        if not 0 < self.v <= 1:
            return [f"discount factor v must be in (0, 1], got {self.v}"]
        return []


class TransitionModel(Protocol):
    """Anything that yields one-step transition matrices for a contract."""

    def predict_sequence(self, contract: Contract) -> TransitionSequence:
        """Return pi^(k)(c) for k = 0..n*m-1 as a (K, 2, 2) array."""
        ...


def transition_matrix(p_death: float) -> TransitionMatrix:
    """Build the matrix with alive->dead probability ``p_death`` and an absorbing dead row."""
    return np.array([[1.0 - p_death, p_death], [0.0, 1.0]])


def transition_sequence(p_death: np.ndarray) -> TransitionSequence:
    """Vectorised ``transition_matrix`` over a 1-D array of death probabilities."""
    p_death = np.asarray(p_death, dtype=np.float64)
    seq = np.zeros((p_death.shape[0], 2, 2))
    seq[:, 0, 0] = 1.0 - p_death
    seq[:, 0, 1] = p_death
    seq[:, 1, 1] = 1.0
    return seq


def is_transition_matrix(p: np.ndarray, atol: float = 1e-12) -> bool:
    """Check row-stochasticity, entry range and the exact absorbing row."""
    p = np.asarray(p)
    if p.shape != (2, 2):
        return False
    if np.any(p < -atol) or np.any(p > 1 + atol):
        return False
    if not np.allclose(p.sum(axis=1), 1.0, rtol=0.0, atol=atol):
        return False
    return p[DEAD, ALIVE] == 0.0 and p[DEAD, DEAD] == 1.0


def _cash_flow_grid(contract: Contract, expenses: ExpenseStructure, k: np.ndarray) -> np.ndarray:
    """Undiscounted cash flows for an array of iterations, shape (2, 2, len(k))."""
    premium = contract.P or 0.0
    m = contract.m
    paying = (k < contract.premium_iterations).astype(np.float64)
    after_paying = ((k >= contract.premium_iterations) & (k < contract.iterations)).astype(np.float64)
    at_inception = (k == 0).astype(np.float64)

    running = (
        premium / m * paying
        - expenses.beta * premium / m * paying
        - expenses.gamma1 * contract.S / m * paying
        - expenses.gamma2 * contract.S / m * after_paying
    )
    cf = np.zeros((2, 2, k.shape[0]))
    cf[ALIVE, ALIVE] = running - contract.t * expenses.alpha * premium * at_inception
    cf[ALIVE, DEAD] = (running - contract.S) * (k > 0)
    return cf


def cash_flow(contract: Contract, expenses: ExpenseStructure, k: int) -> np.ndarray:
    """Cash flows of iteration ``k`` indexed by state transition (i, j).

    Row 0 holds the survival (0->0) and death (0->1) cash flows from the
    insurer's perspective; row 1 is identically zero.

    Raises:
        IndexError: if k is outside 0..n*m.
    """
    if not 0 <= k <= contract.iterations:
        raise IndexError(f"iteration k={k} outside 0..{contract.iterations}")
    return _cash_flow_grid(contract, expenses, np.array([k]))[:, :, 0]


def discounted_cash_flows(contract: Contract, expenses: ExpenseStructure, discount: DiscountFactor) -> np.ndarray:
    """Discounted cash-flow tensor y[i, j, k] for k = 0..n*m, shape (2, 2, n*m+1)."""
    k = np.arange(contract.iterations + 1)
    cf = _cash_flow_grid(contract, expenses, k)
    return cf * discount.v ** (k / contract.m)


def multi_step(seq: TransitionSequence, start: int, steps: int) -> TransitionMatrix:
    """Product pi^(start) @ ... @ pi^(start+steps-1); the empty product is the identity."""
    if start < 0 or steps < 0 or start + steps > len(seq):
        raise IndexError(f"multi_step({start}, {steps}) out of range for a sequence of length {len(seq)}")
    result = np.eye(2)
    for offset in range(steps):
        result = result @ seq[start + offset]
    return result


def psi(pi_seq: TransitionSequence, contract: Contract, y: np.ndarray) -> float:
    """Expected discounted value of ``y`` under the chain started alive.

    The k=0 cash flow enters with weight one; for k >= 1 the alive row of
    the k-1 step product weights the transition-indexed cash flows of step k.
    Only the alive probability is carried forward since the dead state is
    absorbing with zero cash flows.
    """
    K = contract.iterations
    if len(pi_seq) < K:
        raise ValueError(f"transition sequence has {len(pi_seq)} steps, contract needs {K}")
    if y.shape[2] < K + 1:
        raise ValueError(f"cash-flow tensor has {y.shape[2]} iterations, contract needs {K + 1}")

    p_stay = pi_seq[:K, ALIVE, ALIVE]
    p_die = pi_seq[:K, ALIVE, DEAD]
    alive = np.ones(K)
    if K > 1:
        alive[1:] = np.cumprod(p_stay[:-1])
    steps = alive * (p_stay * y[ALIVE, ALIVE, 1 : K + 1] + p_die * y[ALIVE, DEAD, 1 : K + 1])
    return float(y[ALIVE, ALIVE, 0] + steps.sum())


def apv(
    contract: Contract, pi_seq: TransitionSequence, expenses: ExpenseStructure, discount: DiscountFactor
) -> float:
    """Actuarial present value of a priced contract; zero iff APV-consistent."""
    if contract.P is None:
        raise ValueError("apv requires a priced contract (P is None)")
    return psi(pi_seq, contract, discounted_cash_flows(contract, expenses, discount))


def premium_coefficient(
    contract: Contract, pi_seq: TransitionSequence, expenses: ExpenseStructure, discount: DiscountFactor
) -> float:
    """Derivative of the APV with respect to the annual premium.

    Equals (1-beta)/m times the premium annuity minus t*alpha. The annuity
    weights every premium date k < t*m with the probability of being alive at
    the start of period k, because the death cash flow of period k also
    contains that period's premium.
    """
    unit = dataclasses.replace(contract, P=1.0, S=0.0)
    return psi(pi_seq, unit, discounted_cash_flows(unit, expenses, discount))


def sum_insured_part(
    contract: Contract, pi_seq: TransitionSequence, expenses: ExpenseStructure, discount: DiscountFactor
) -> float:
    """APV with every premium-dependent cash flow dropped (P set to zero)."""
    unpriced = contract.with_premium(0.0)
    return psi(pi_seq, unpriced, discounted_cash_flows(unpriced, expenses, discount))


def equivalence_premium(
    contract: Contract, pi_seq: TransitionSequence, expenses: ExpenseStructure, discount: DiscountFactor
) -> float:
    """Annual premium that makes the contract APV-consistent under ``pi_seq``.

    Raises:
        UnpriceableContractError: if the premium coefficient is not positive.
    """
    coefficient = premium_coefficient(contract, pi_seq, expenses, discount)
    if not coefficient > 0:
        raise UnpriceableContractError(
            f"premium coefficient {coefficient:.6g} <= 0 (a0={contract.a0}, n={contract.n}, "
            f"t={contract.t}, m={contract.m}): expenses exceed expected premium income"
        )
    return -sum_insured_part(contract, pi_seq, expenses, discount) / coefficient


def backtest_premium(
    model: TransitionModel, contract: Contract, expenses: ExpenseStructure, discount: DiscountFactor
) -> float:
    """Premium implied by a model's transition probabilities for a recorded contract."""
    return equivalence_premium(contract, model.predict_sequence(contract), expenses, discount)


def relative_error(premium: float, estimate: float) -> float:
    """Relative backtest error (P - P_hat) / P."""
    return (premium - estimate) / premium
