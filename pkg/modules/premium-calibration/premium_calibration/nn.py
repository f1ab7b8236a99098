"""Neural layers, losses and training utilities on top of ``autodiff``.

Covers what the two calibration networks need: dense ReLU stacks, one GRU
layer, softmax and KL loss, adam, global-norm clipping, the step learning
rate schedule, early stopping, min-max scaling and categorical encoding.
"""

import copy
import hashlib
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff import softmax
from .errors import ShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "DenseLayer",
    "EarlyStopping",
    "FeedForwardNet",
    "GruLayer",
    "MinMaxScaler",
    "ResidualNet",
    "adam_step",
    "binary_flag",
    "clip_gradients",
    "count_parameters",
    "dense_forward",
    "early_stopping",
    "global_norm",
    "gru_sequence",
    "gru_step",
    "kl_loss",
    "kl_loss_from_logits",
    "lr_schedule",
    "one_hot",
    "softmax",
]

KL_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def he_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / n_in)
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def recurrent_uniform(rng: np.random.Generator, n_h: int) -> np.ndarray:
    limit = 1.0 / math.sqrt(n_h)
    return rng.uniform(-limit, limit, size=(n_h, n_h))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """Fully connected layer ``act(x W + b)``."""

    W: Tensor
    b: Tensor
    activation: Literal["relu", "linear"] = "relu"

    @classmethod
    def create(
        cls, n_in: int, n_out: int, rng: np.random.Generator, activation: Literal["relu", "linear"] = "relu"
    ) -> "DenseLayer":
        return cls(
            W=Tensor(he_uniform(rng, n_in, n_out), requires_grad=True),
            b=Tensor(np.zeros(n_out), requires_grad=True),
            activation=activation,
        )

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor | np.ndarray) -> Tensor:
    """Apply a dense layer to ``x`` of shape (..., n_in).

    Raises:
        ShapeError: if the last dimension of x is not n_in.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"dense layer expects last dimension {layer.n_in}, got shape {x.shape}")
    out = ad.matmul(x, layer.W) + layer.b
    if layer.activation == "relu":
        return ad.relu(out)
    return out


@dataclass
class GruLayer:
    """Gated recurrent unit with a single bias per gate.

    The reset gate scales the previous hidden state before the recurrent
    matmul of the candidate state.
    """

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def create(cls, n_in: int, n_h: int, rng: np.random.Generator) -> "GruLayer":
        def weight(values: np.ndarray) -> Tensor:
            return Tensor(values, requires_grad=True)

        return cls(
            W_z=weight(he_uniform(rng, n_in, n_h)),
            W_r=weight(he_uniform(rng, n_in, n_h)),
            W_h=weight(he_uniform(rng, n_in, n_h)),
            U_z=weight(recurrent_uniform(rng, n_h)),
            U_r=weight(recurrent_uniform(rng, n_h)),
            U_h=weight(recurrent_uniform(rng, n_h)),
            b_z=weight(np.zeros(n_h)),
            b_r=weight(np.zeros(n_h)),
            b_h=weight(np.zeros(n_h)),
        )

    @property
    def n_in(self) -> int:
        return self.W_z.shape[0]

    @property
    def n_h(self) -> int:
        return self.W_z.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "W_z": self.W_z,
            "W_r": self.W_r,
            "W_h": self.W_h,
            "U_z": self.U_z,
            "U_r": self.U_r,
            "U_h": self.U_h,
            "b_z": self.b_z,
            "b_r": self.b_r,
            "b_h": self.b_h,
        }


def _gru_update(layer: GruLayer, xz: Tensor, xr: Tensor, xh: Tensor, h_prev: Tensor) -> Tensor:
    z = ad.sigmoid(xz + ad.matmul(h_prev, layer.U_z))
    r = ad.sigmoid(xr + ad.matmul(h_prev, layer.U_r))
    candidate = ad.tanh(xh + ad.matmul(r * h_prev, layer.U_h))
    return (1.0 - z) * h_prev + z * candidate


def gru_step(layer: GruLayer, x_t: Tensor | np.ndarray, h_prev: Tensor | np.ndarray) -> Tensor:
    """One recurrent step for inputs (..., n_in) and hidden state (..., n_h)."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    if x_t.shape[-1] != layer.n_in or h_prev.shape[-1] != layer.n_h:
        raise ShapeError(f"gru step expects inputs (..., {layer.n_in}) and state (..., {layer.n_h})")
    xz = ad.matmul(x_t, layer.W_z) + layer.b_z
    xr = ad.matmul(x_t, layer.W_r) + layer.b_r
    xh = ad.matmul(x_t, layer.W_h) + layer.b_h
    return _gru_update(layer, xz, xr, xh, h_prev)


def gru_sequence(layer: GruLayer, xs: Tensor) -> Tensor:
    """Unroll over ``xs`` of shape (B, T, n_in) from a zero state; returns (B, T, n_h).

    Input projections are computed for all steps at once; only the
    recurrent part is evaluated step by step.
    """
    if xs.ndim != 3 or xs.shape[-1] != layer.n_in:
        raise ShapeError(f"gru sequence expects (B, T, {layer.n_in}), got {xs.shape}")
    batch, steps, _ = xs.shape
    xz = ad.matmul(xs, layer.W_z) + layer.b_z
    xr = ad.matmul(xs, layer.W_r) + layer.b_r
    xh = ad.matmul(xs, layer.W_h) + layer.b_h
    h = Tensor(np.zeros((batch, layer.n_h)))
    states = []
    for k in range(steps):
        h = _gru_update(layer, xz[:, k, :], xr[:, k, :], xh[:, k, :], h)
        states.append(h)
    return ad.stack(states, axis=1)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class FeedForwardNet:
    """Dense ReLU stack with a linear output layer.

    ``widths`` lists every layer width including input and output, e.g.
    (2, 40, 40, 20, 2).
    """

    kind = "feedforward"

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise ValueError(f"need at least input and output widths, got {list(widths)}")
        self.widths = tuple(int(w) for w in widths)
        last = len(self.widths) - 2
        self.layers = [
            DenseLayer.create(n_in, n_out, rng, activation="linear" if i == last else "relu")
            for i, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:], strict=True))
        ]

    def __call__(self, x: Tensor | np.ndarray) -> Tensor:
        out = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            out = layer(out)
        return out

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers, start=1):
            for name, tensor in layer.parameters().items():
                params[f"layer{i}.{name}"] = tensor
        return params

    def architecture(self) -> dict[str, Any]:
        return {"kind": self.kind, "widths": list(self.widths)}


class ResidualNet:
    """Dense ReLU layers, one GRU layer, then a linear dense output.

    ``widths`` = (n_in, w1, ..., w_gru, n_out): every width before the last
    hidden one belongs to a dense ReLU layer, the last hidden width is the
    GRU state. Table-style default is (4, 50, 50, 50, 50, 50, 2).
    """

    kind = "residual-gru"

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, zero_output: bool = False):
        if len(widths) < 3:
            raise ValueError(f"need input, GRU and output widths, got {list(widths)}")
        self.widths = tuple(int(w) for w in widths)
        dense_widths = self.widths[:-2]
        self.dense = [
            DenseLayer.create(n_in, n_out, rng, activation="relu")
            for n_in, n_out in zip(dense_widths[:-1], dense_widths[1:], strict=True)
        ]
        self.gru = GruLayer.create(self.widths[-3], self.widths[-2], rng)
        self.output = DenseLayer.create(self.widths[-2], self.widths[-1], rng, activation="linear")
        if zero_output:
            self.zero_output()

    def zero_output(self) -> None:
        """Set the output layer to zero so the net starts as the zero residual."""
        self.output.W.data[...] = 0.0
        self.output.b.data[...] = 0.0

    def __call__(self, xs: Tensor | np.ndarray) -> Tensor:
        """Map (B, T, n_in) step features to (B, T, n_out) logits."""
        out = xs if isinstance(xs, Tensor) else Tensor(xs)
        for layer in self.dense:
            out = layer(out)
        return self.output(gru_sequence(self.gru, out))

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        index = 1
        for layer in self.dense:
            for name, tensor in layer.parameters().items():
                params[f"layer{index}.{name}"] = tensor
            index += 1
        for name, tensor in self.gru.parameters().items():
            params[f"layer{index}.{name}"] = tensor
        index += 1
        for name, tensor in self.output.parameters().items():
            params[f"layer{index}.{name}"] = tensor
        return params

    def architecture(self) -> dict[str, Any]:
        return {"kind": self.kind, "widths": list(self.widths)}


def count_parameters(net: FeedForwardNet | ResidualNet) -> int:
    return sum(tensor.data.size for tensor in net.parameters().values())


def load_parameters(net: FeedForwardNet | ResidualNet, values: dict[str, np.ndarray]) -> None:
    """Copy arrays into the network's parameters in place.

    Raises:
        ShapeError: on a missing, unexpected or misshapen parameter.
    """
    params = net.parameters()
    if set(values) != set(params):
        missing = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        raise ShapeError(f"parameter names do not match the architecture (missing {missing}, unexpected {extra})")
    for name, tensor in params.items():
        array = np.asarray(values[name], dtype=np.float64)
        if array.shape != tensor.shape:
            raise ShapeError(f"{name}: expected shape {tensor.shape}, got {array.shape}")
        tensor.data[...] = array


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _target_entropy_terms(target: np.ndarray) -> np.ndarray:
    # p * ln p with 0 * ln 0 = 0
    safe = np.where(target > 0, target, 1.0)
    return np.where(target > 0, target * np.log(safe), 0.0)


def kl_loss(target: np.ndarray, predicted: Tensor) -> Tensor:
    """Mean over rows of sum_j p_j ln(p_j / q_j), with q floored at 1e-12."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != predicted.shape:
        raise ShapeError(f"target shape {target.shape} does not match prediction {predicted.shape}")
    cross = ad.tensor_sum(target * ad.log(ad.maximum(predicted, KL_FLOOR)), axis=-1)
    entropy = _target_entropy_terms(target).sum(axis=-1)
    return ad.tensor_mean(entropy - cross)


def kl_loss_from_logits(target: np.ndarray, logits: Tensor) -> Tensor:
    """KL loss against softmax(logits), evaluated through log-softmax."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    cross = ad.tensor_sum(target * ad.log_softmax(logits, axis=-1), axis=-1)
    entropy = _target_entropy_terms(target).sum(axis=-1)
    return ad.tensor_mean(entropy - cross)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment accumulators and step counter of the adam optimizer."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(
    state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float
) -> dict[str, Tensor]:
    """One bias-corrected adam update, applied to the parameters in place."""
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} does not match parameter {param.shape}")
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad**2
        state.m[name] = m
        state.v[name] = v
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # sorted names fix the reduction order
    return math.sqrt(sum(float(np.sum(grads[name] ** 2)) for name in sorted(grads)))


def clip_gradients(grads: dict[str, np.ndarray], eta: float = 100.0) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients by eta/norm when their global L2 norm exceeds eta.

    Returns:
        The (possibly rescaled) gradients and the pre-clip global norm.
    """
    norm = global_norm(grads)
    if norm <= eta:
        return grads, norm
    scale = eta / norm
    return {name: grad * scale for name, grad in grads.items()}, norm


def lr_schedule(epoch: int, base_lr: float, warmup: int = 50, every: int = 15, factor: float = 0.9) -> float:
    """Constant during warm-up, then multiplied by ``factor`` every ``every`` epochs."""
    if epoch < warmup:
        return base_lr
    return base_lr * factor ** ((epoch - warmup) // every)


class EarlyStopping:
    """Stops after ``patience`` epochs without a strict improvement of the loss.

    Keeps a copy of the parameters at the best epoch so they can be restored.
    """

    def __init__(self, patience: int = 50):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = -1
        self.wait = 0
        self.best_params: dict[str, np.ndarray] | None = None

    def update(self, loss: float, epoch: int, params: dict[str, Tensor] | None = None) -> bool:
        """Record one epoch's loss; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.wait = 0
            if params is not None:
                self.best_params = {name: tensor.data.copy() for name, tensor in params.items()}
            return False
        self.wait += 1
        return self.wait >= self.patience

    def restore(self, params: dict[str, Tensor]) -> None:
        if self.best_params is None:
            return
        for name, tensor in params.items():
            tensor.data[...] = self.best_params[name]
        logger.info(f"Restored parameters from epoch {self.best_epoch} (loss {self.best_loss:.6g})")


def early_stopping(history: Sequence[float], patience: int = 50) -> bool:
    """True if ``history`` contains ``patience`` consecutive epochs without strict improvement."""
    stopper = EarlyStopping(patience=patience)
    return any(stopper.update(loss, epoch) for epoch, loss in enumerate(history))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass
class MinMaxScaler:
    """Per-feature affine map onto [0, 1] over the fitted data.

    Constant features map to 0. Values outside the fitted range are passed
    through unclamped.
    """

    minimum: np.ndarray
    maximum: np.ndarray
    names: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, features: np.ndarray, names: Sequence[str] | None = None) -> "MinMaxScaler":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ShapeError(f"scaler needs a non-empty (N, F) feature matrix, got shape {features.shape}")
        names = list(names) if names is not None else [f"x{i}" for i in range(features.shape[1])]
        if len(names) != features.shape[1]:
            raise ShapeError(f"{len(names)} names for {features.shape[1]} features")
        return cls(minimum=features.min(axis=0), maximum=features.max(axis=0), names=names)

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        span = self.span
        constant = span == 0
        return np.where(constant, 0.0, (x - self.minimum) / np.where(constant, 1.0, span))

    def invert(self, scaled: np.ndarray) -> np.ndarray:
        return self.minimum + np.asarray(scaled, dtype=np.float64) * self.span

    def to_dict(self) -> dict[str, Any]:
        return {"names": self.names, "min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MinMaxScaler":
        return cls(
            minimum=np.asarray(data["min"], dtype=np.float64),
            maximum=np.asarray(data["max"], dtype=np.float64),
            names=list(data["names"]),
        )

    def fingerprint(self) -> str:
        """Stable hash of the fitted ranges, used to match checkpoints with portfolios."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def one_hot(values: Sequence[Any], levels: Sequence[Any]) -> np.ndarray:
    """Encode categorical values as (N, len(levels)) indicator rows.

    Raises:
        ValueError: on a value outside ``levels``.
    """
    index = {level: i for i, level in enumerate(levels)}
    encoded = np.zeros((len(values), len(levels)))
    for row, value in enumerate(values):
        if value not in index:
            raise ValueError(f"unknown level '{value}', expected one of {list(levels)}")
        encoded[row, index[value]] = 1.0
    return encoded


def binary_flag(values: Sequence[Any], positive: Any) -> np.ndarray:
    """Two-level one-hot collapsed to a single 0/1 column."""
    return np.array([1.0 if value == positive else 0.0 for value in values])


# ---------------------------------------------------------------------------
# Serialisation helpers
# ---------------------------------------------------------------------------


def encode_array(array: np.ndarray) -> dict[str, Any]:
    """Shape plus row-major float list."""
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "data": array.reshape(-1).tolist()}


def decode_array(payload: dict[str, Any]) -> np.ndarray:
    shape = tuple(payload["shape"])
    data = np.asarray(payload["data"], dtype=np.float64)
    if data.size != math.prod(shape):
        raise ShapeError(f"array payload has {data.size} values for shape {shape}")
    return data.reshape(shape)
