"""Two-stage calibration of transition probabilities from recorded premiums.

Stage 1 fits a feed-forward baseline to a mortality table under a KL loss.
Stage 2 freezes it and trains a residual GRU net whose logits are added to
the baseline's, minimising the mean of |psi| over the portfolio, where psi
is the expected discounted cash flow of a contract under the composed
transition probabilities.
"""

import logging
import math
import time
from collections.abc import Callable
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import autodiff as ad
from .actuarial import ALIVE
from .actuarial import DEAD
from .actuarial import Contract
from .actuarial import TransitionModel
from .actuarial import TransitionSequence
from .actuarial import psi
from .autodiff import Tape
from .autodiff import Tensor
from .config import BaselineConfig
from .config import ResidualConfig
from .errors import ConsistencyError
from .errors import InputError
from .errors import NumericalError
from .mortality import TableDataset
from .nn import AdamState
from .nn import EarlyStopping
from .nn import FeedForwardNet
from .nn import MinMaxScaler
from .nn import ResidualNet
from .nn import adam_step
from .nn import clip_gradients
from .nn import decode_array
from .nn import encode_array
from .nn import global_norm
from .nn import kl_loss_from_logits
from .nn import load_parameters
from .nn import lr_schedule
from .portfolio import Portfolio
from .runs import atomic_write_text
from .runs import load_checkpoint
from .runs import save_checkpoint

logger = logging.getLogger(__name__)

BASE_FEATURES = ["age", "m"]
RESIDUAL_FEATURES = ["age", "m", "female", "smoker"]
PREDICT_BATCH_SIZE = 256


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass
class FeatureScalers:
    """Baseline scaler (fitted on the table grid) and residual scaler (fitted on the portfolio)."""

    base: MinMaxScaler
    residual: MinMaxScaler

    def fingerprint(self) -> str:
        return self.residual.fingerprint()


def raw_step_features(contract: Contract, k: np.ndarray) -> np.ndarray:
    """Unscaled (current age, m, female, smoker) for iterations ``k``; current age is a0 + k/m."""
    k = np.asarray(k, dtype=np.float64)
    features = np.empty((k.shape[0], len(RESIDUAL_FEATURES)))
    features[:, 0] = contract.a0 + k / contract.m
    features[:, 1] = contract.m
    features[:, 2] = 1.0 if contract.gender == "female" else 0.0
    features[:, 3] = 1.0 if contract.smoker else 0.0
    return features


def fit_residual_scaler(contracts: Sequence[Contract]) -> MinMaxScaler:
    """Fit the residual scaler over every step of every contract.

    Current age is monotone in k, so the first and last step of each
    contract carry the extremes.
    """
    rows = [raw_step_features(c, np.array([0, c.iterations - 1])) for c in contracts]
    return MinMaxScaler.fit(np.concatenate(rows), names=RESIDUAL_FEATURES)


def encode_contract(contract: Contract, scalers: FeatureScalers) -> tuple[np.ndarray, np.ndarray]:
    """Scaled baseline (K, 2) and residual (K, 4) features for k = 0..K-1."""
    raw = raw_step_features(contract, np.arange(contract.iterations))
    return scalers.base.apply(raw[:, :2]), scalers.residual.apply(raw)


def encode_step(contract: Contract, k: int, scalers: FeatureScalers) -> tuple[np.ndarray, np.ndarray]:
    """Scaled baseline and residual feature vectors of iteration ``k``.

    Premium and sum insured never enter the features.

    Raises:
        IndexError: if k is outside 0..K-1.
    """
    if not 0 <= k < contract.iterations:
        raise IndexError(f"iteration k={k} outside 0..{contract.iterations - 1}")
    raw = raw_step_features(contract, np.array([k]))
    return scalers.base.apply(raw[:, :2])[0], scalers.residual.apply(raw)[0]


@dataclass
class SequenceBatch:
    """Contracts padded to a common number of steps T.

    ``y_survive`` and ``y_death`` hold the alive row of the discounted
    cash-flow tensors for k = 0..T; padded positions are zero and masked.
    """

    indices: np.ndarray
    lengths: np.ndarray
    base_x: np.ndarray  # (B, T, 2)
    res_x: np.ndarray  # (B, T, 4)
    mask: np.ndarray  # (B, T)
    y_survive: np.ndarray  # (B, T + 1)
    y_death: np.ndarray  # (B, T + 1)
    base_logits: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def steps(self) -> int:
        return self.mask.shape[1]

    @classmethod
    def build(
        cls,
        contracts: Sequence[Contract],
        flows: Sequence[np.ndarray] | None,
        scalers: FeatureScalers,
        indices: Sequence[int],
        steps: int | None = None,
    ) -> "SequenceBatch":
        indices = np.asarray(indices, dtype=np.int64)
        lengths = np.array([contracts[i].iterations for i in indices])
        T = int(lengths.max()) if steps is None else steps
        if T < lengths.max():
            raise ValueError(f"batch length {T} shorter than the longest contract ({lengths.max()} steps)")
        B = len(indices)
        base_x = np.zeros((B, T, len(BASE_FEATURES)))
        res_x = np.zeros((B, T, len(RESIDUAL_FEATURES)))
        mask = np.zeros((B, T))
        y_survive = np.zeros((B, T + 1))
        y_death = np.zeros((B, T + 1))
        for row, index in enumerate(indices):
            K = lengths[row]
            base_x[row, :K], res_x[row, :K] = encode_contract(contracts[index], scalers)
            mask[row, :K] = 1.0
            if flows is not None:
                y_survive[row, : K + 1] = flows[index][ALIVE, ALIVE, : K + 1]
                y_death[row, : K + 1] = flows[index][ALIVE, DEAD, : K + 1]
        return cls(indices, lengths, base_x, res_x, mask, y_survive, y_death)


def make_batches(
    contracts: Sequence[Contract],
    flows: Sequence[np.ndarray] | None,
    scalers: FeatureScalers,
    batch_size: int,
) -> list[SequenceBatch]:
    """Group contracts of similar length: stable sort by K, then chunk."""
    lengths = np.array([c.iterations for c in contracts])
    order = np.argsort(lengths, kind="stable")
    return [
        SequenceBatch.build(contracts, flows, scalers, order[start : start + batch_size])
        for start in range(0, len(order), batch_size)
    ]


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class BaselineModel:
    """Feed-forward net mapping scaled (age, m) to two logits, fitted for one gender."""

    net: FeedForwardNet
    scaler: MinMaxScaler
    gender: str

    def freeze(self) -> None:
        for tensor in self.net.parameters().values():
            tensor.requires_grad = False

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.net(features).data

    def death_probabilities(self, ages: np.ndarray, styles: np.ndarray) -> np.ndarray:
        """Sub-annual death probability for raw (age, m) pairs."""
        raw = np.column_stack([ages, styles]).astype(np.float64)
        return ad.softmax(Tensor(self.logits(self.scaler.apply(raw))), axis=-1).data[:, DEAD]

    def to_checkpoint(self) -> dict[str, Any]:
        return {
            "gender": self.gender,
            "architecture": self.net.architecture(),
            "scaler": self.scaler.to_dict(),
            "parameters": {name: encode_array(t.data) for name, t in self.net.parameters().items()},
        }

    @classmethod
    def from_checkpoint(cls, data: dict[str, Any]) -> "BaselineModel":
        net = FeedForwardNet(data["architecture"]["widths"], make_rng(0))
        load_parameters(net, {name: decode_array(p) for name, p in data["parameters"].items()})
        model = cls(net=net, scaler=MinMaxScaler.from_dict(data["scaler"]), gender=data["gender"])
        model.freeze()
        return model


@dataclass
class Model:
    """Frozen baseline plus residual net; row 0 of each step is softmax(base + res)."""

    base: BaselineModel
    res: ResidualNet
    scalers: FeatureScalers
    loss_exponent: float = 1.0

    def predict_sequence(self, contract: Contract) -> TransitionSequence:
        return predict_sequence(self, contract)

    def predict_sequences(self, contracts: Sequence[Contract]) -> list[TransitionSequence]:
        return predict_sequences(self, contracts)

    def to_checkpoint(self) -> dict[str, Any]:
        return {
            "baseline": self.base.to_checkpoint(),
            "residual": {
                "architecture": self.res.architecture(),
                "scaler": self.scalers.residual.to_dict(),
                "parameters": {name: encode_array(t.data) for name, t in self.res.parameters().items()},
            },
            "fingerprint": self.scalers.fingerprint(),
            "loss_exponent": self.loss_exponent,
        }

    @classmethod
    def from_checkpoint(cls, data: dict[str, Any]) -> "Model":
        base = BaselineModel.from_checkpoint(data["baseline"])
        residual = data["residual"]
        res = ResidualNet(residual["architecture"]["widths"], make_rng(0))
        load_parameters(res, {name: decode_array(p) for name, p in residual["parameters"].items()})
        scalers = FeatureScalers(base=base.scaler, residual=MinMaxScaler.from_dict(residual["scaler"]))
        if scalers.fingerprint() != data["fingerprint"]:
            raise ConsistencyError("checkpoint fingerprint does not match its residual scaler")
        return cls(base=base, res=res, scalers=scalers, loss_exponent=data.get("loss_exponent", 1.0))


def composite_logits(model: Model, batch: SequenceBatch) -> Tensor:
    """Joint logits base + res for every step of the batch, shape (B, T, 2)."""
    base = batch.base_logits if batch.base_logits is not None else model.base.logits(batch.base_x)
    return model.res(batch.res_x) + base


def batch_psi(model: Model, batch: SequenceBatch) -> Tensor:
    """psi of every contract in the batch, shape (B,).

    With L_j the log probability of surviving steps 0..j, cash-flow time
    j+1 is weighted by exp(L_j) in the survival cell and by
    exp(L_j - log p00_j + log p01_j) in the death cell. Padded steps are
    masked and carry zero cash flows.
    """
    log_probs = ad.log_softmax(composite_logits(model, batch), axis=-1)
    log_stay = log_probs[:, :, ALIVE]
    log_die = log_probs[:, :, DEAD]
    log_alive = ad.cumsum(log_stay, axis=1)
    survive = ad.exp(log_alive) * batch.y_survive[:, 1:]
    death = ad.exp(log_alive - log_stay + log_die) * batch.y_death[:, 1:]
    return ad.tensor_sum((survive + death) * batch.mask, axis=1) + batch.y_survive[:, 0]


def contract_losses(model: Model, batch: SequenceBatch, loss_exponent: float | None = None) -> Tensor:
    """Per-contract loss |psi|^p, shape (B,)."""
    p = model.loss_exponent if loss_exponent is None else loss_exponent
    magnitude = ad.absolute(batch_psi(model, batch))
    return magnitude if p == 1 else ad.power(magnitude, p)


def batch_transition_probabilities(model: Model, batch: SequenceBatch) -> np.ndarray:
    return ad.softmax(composite_logits(model, batch), axis=-1).data


def predict_sequences(
    model: Model, contracts: Sequence[Contract], batch_size: int = PREDICT_BATCH_SIZE
) -> list[TransitionSequence]:
    """Transition sequences for many contracts, evaluated in length-sorted batches."""
    sequences: list[TransitionSequence | None] = [None] * len(contracts)
    for batch in make_batches(contracts, None, model.scalers, batch_size):
        probs = batch_transition_probabilities(model, batch)
        for row, index in enumerate(batch.indices):
            K = batch.lengths[row]
            seq = np.zeros((K, 2, 2))
            seq[:, ALIVE, :] = probs[row, :K]
            seq[:, DEAD, DEAD] = 1.0
            sequences[index] = seq
    return sequences


def predict_sequence(model: Model, contract: Contract) -> TransitionSequence:
    """pi^(k)(c) for k = 0..K-1 under the composed model."""
    return predict_sequences(model, [contract])[0]


def empirical_risk(model: TransitionModel, portfolio: Portfolio, loss_exponent: float = 1.0) -> float:
    """Mean of |psi|^p over the portfolio for any transition model."""
    if isinstance(model, Model):
        total = 0.0
        for batch in make_batches(portfolio.contracts, portfolio.cash_flows(), model.scalers, PREDICT_BATCH_SIZE):
            total += float(contract_losses(model, batch, loss_exponent).data.sum())
        return total / len(portfolio)
    values = np.array([abs(psi(model.predict_sequence(c), c, y)) ** loss_exponent for c, y in portfolio])
    return float(values.mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    grad_norm: float  # largest pre-clip global norm of the epoch
    wall_time: float  # seconds since training started


@dataclass
class TrainingHistory:
    """Per-epoch training records."""

    loss_name: str = "loss"
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    converged: bool = False

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [(r.epoch, r.lr, r.loss, r.grad_norm, r.wall_time) for r in self.records],
            columns=["epoch", "lr", self.loss_name, "grad_norm", "wall_time"],
        )
        return frame

    def write_csv(self, path: Path) -> None:
        atomic_write_text(path, self.to_frame().to_csv(index=False, lineterminator="\n"))

    def summary(self) -> dict[str, Any]:
        return {
            "epochs": len(self.records),
            "final_loss": self.records[-1].loss if self.records else None,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "converged": self.converged,
        }


def baseline_fit_error(model: BaselineModel, ds: TableDataset, ages: Sequence[int]) -> float:
    """Max relative error of the fitted death probability over ages[0]..ages[1] and all m."""
    rows = (ds.ages >= ages[0]) & (ds.ages <= ages[1])
    truth = ds.targets[rows, ALIVE, DEAD]
    fitted = model.death_probabilities(ds.ages[rows], ds.styles[rows])
    return float(np.max(np.abs(fitted - truth) / np.maximum(truth, 1e-12)))


def fit_baseline(
    ds: TableDataset,
    cfg: BaselineConfig,
    seed: int,
    log_path: Path | None = None,
) -> tuple[BaselineModel, TrainingHistory]:
    """Fit the baseline net to the table until the fit tolerance or max epochs.

    Raises:
        InputError: on an empty dataset.
        NumericalError: if the loss becomes non-finite.
    """
    if len(ds) == 0:
        raise InputError("baseline training set is empty")
    rng = make_rng(seed)
    model = BaselineModel(net=FeedForwardNet(cfg.widths, rng), scaler=ds.scaler, gender=ds.gender)
    params = model.net.parameters()
    targets = ds.targets[:, ALIVE, :]
    state = AdamState()
    history = TrainingHistory(loss_name="kl")
    started = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(ds))
        max_norm = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            with Tape() as tape:
                loss = kl_loss_from_logits(targets[rows], model.net(ds.features[rows]))
            tape.backward(loss)
            grads = {name: p.grad if p.grad is not None else np.zeros(p.shape) for name, p in params.items()}
            max_norm = max(max_norm, global_norm(grads))
            adam_step(state, params, grads, cfg.lr)

        full_loss = kl_loss_from_logits(targets, model.net(ds.features)).item()
        if not math.isfinite(full_loss):
            raise NumericalError(
                f"baseline loss is {full_loss} at epoch {epoch} (lr {cfg.lr}, grad norm {max_norm:.4g})"
            )
        history.append(EpochRecord(epoch, cfg.lr, full_loss, max_norm, time.perf_counter() - started))
        if log_path is not None:
            history.write_csv(log_path)
        if epoch % cfg.log_every == 0:
            logger.info(f"Baseline epoch {epoch}: KL {full_loss:.6g}")

        if (epoch + 1) % cfg.check_every == 0:
            error = baseline_fit_error(model, ds, cfg.tolerance_ages)
            logger.debug(f"Baseline epoch {epoch}: max relative error {error:.4f}")
            if error <= cfg.tolerance:
                history.converged = True
                logger.info(f"Baseline reached tolerance {cfg.tolerance} at epoch {epoch} (error {error:.4f})")
                break

    if not history.converged:
        error = baseline_fit_error(model, ds, cfg.tolerance_ages)
        logger.warning(f"Baseline stopped after {cfg.max_epochs} epochs with max relative error {error:.4f}")
    history.best_epoch = history.records[-1].epoch
    model.freeze()
    return model, history


def batches_risk(model: Model, batches: Sequence[SequenceBatch], count: int) -> float:
    """Mean per-contract loss over prepared batches at the current parameters."""
    return sum(float(contract_losses(model, batch).data.sum()) for batch in batches) / count


EpochCallback = Callable[[int, Model, TrainingHistory], None]


def fit_residual(
    portfolio: Portfolio,
    base: BaselineModel,
    cfg: ResidualConfig,
    seed: int,
    log_path: Path | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> tuple[Model, TrainingHistory]:
    """Train the residual net on the frozen baseline by minimising mean |psi|^p.

    Batches are shuffled per epoch from a seeded generator. The epoch risk is
    evaluated on the whole portfolio with the end-of-epoch parameters, which
    are the ones early stopping keeps, so the restored model reproduces the
    best recorded risk.

    Raises:
        InputError: on an empty portfolio.
        NumericalError: if a batch loss becomes non-finite.
    """
    if len(portfolio) == 0:
        raise InputError("portfolio is empty")
    rng = make_rng(seed)
    base.freeze()
    scalers = FeatureScalers(base=base.scaler, residual=fit_residual_scaler(portfolio.contracts))
    model = Model(
        base=base,
        res=ResidualNet(cfg.widths, rng, zero_output=cfg.zero_output),
        scalers=scalers,
        loss_exponent=cfg.loss_exponent,
    )
    batches = make_batches(portfolio.contracts, portfolio.cash_flows(), scalers, cfg.batch_size)
    for batch in batches:
        batch.base_logits = base.logits(batch.base_x)

    params = model.res.parameters()
    state = AdamState()
    stopper = EarlyStopping(patience=cfg.patience)
    history = TrainingHistory(loss_name="r_emp")
    base_lr = cfg.learning_rate(base.gender)
    clip_warned = False
    started = time.perf_counter()
    logger.info(f"Residual training on {len(portfolio)} contracts in {len(batches)} batches (lr {base_lr})")

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, base_lr, warmup=cfg.warmup, every=cfg.decay_every, factor=cfg.decay_factor)
        max_norm = 0.0
        for batch_index in rng.permutation(len(batches)):
            batch = batches[batch_index]
            with Tape() as tape:
                loss = ad.tensor_mean(contract_losses(model, batch))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"residual loss is {value} at epoch {epoch}, batch {batch_index} "
                    f"(lr {lr:.3g}, last pre-clip norm {max_norm:.4g})"
                )
            tape.backward(loss)
            grads = {name: p.grad if p.grad is not None else np.zeros(p.shape) for name, p in params.items()}
            grads, norm = clip_gradients(grads, cfg.clip_norm)
            max_norm = max(max_norm, norm)
            adam_step(state, params, grads, lr)

        r_emp = batches_risk(model, batches, len(portfolio))
        if not math.isfinite(r_emp):
            raise NumericalError(f"residual risk is {r_emp} after epoch {epoch} (lr {lr:.3g})")
        if max_norm > cfg.clip_norm:
            message = f"Epoch {epoch}: pre-clip gradient norm {max_norm:.4g} exceeds {cfg.clip_norm}"
            if clip_warned:
                logger.debug(message)
            else:
                logger.warning(f"{message} (further occurrences logged at debug level)")
                clip_warned = True

        stop = stopper.update(r_emp, epoch, params)
        history.append(EpochRecord(epoch, lr, r_emp, max_norm, time.perf_counter() - started))
        if log_path is not None:
            history.write_csv(log_path)
        if epoch % cfg.log_every == 0:
            logger.info(f"Residual epoch {epoch}: R_emp {r_emp:.6g} (lr {lr:.3g})")
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, history)
        if stop:
            history.stopped_early = True
            logger.info(f"Early stop at epoch {epoch}: no improvement for {cfg.patience} epochs")
            break

    stopper.restore(params)
    history.best_epoch = stopper.best_epoch
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_baseline(path: Path, model: BaselineModel, extra: dict[str, Any] | None = None) -> None:
    save_checkpoint(path, "baseline", {**model.to_checkpoint(), **(extra or {})})


def load_baseline(path: Path) -> BaselineModel:
    return BaselineModel.from_checkpoint(load_checkpoint(path, "baseline"))


def save_model(path: Path, model: Model, extra: dict[str, Any] | None = None) -> None:
    save_checkpoint(path, "model", {**model.to_checkpoint(), **(extra or {})})


def load_model(path: Path) -> Model:
    return Model.from_checkpoint(load_checkpoint(path, "model"))


def check_consistency(model: Model, portfolio: Portfolio) -> None:
    """Refit the residual scaler on ``portfolio`` and compare fingerprints.

    Raises:
        ConsistencyError: if the model was trained on a different portfolio.
    """
    expected = fit_residual_scaler(portfolio.contracts).fingerprint()
    if expected != model.scalers.fingerprint():
        raise ConsistencyError(
            f"model checkpoint (scaler fingerprint {model.scalers.fingerprint()}) "
            f"does not belong to this portfolio (fingerprint {expected})"
        )
