"""Differentiable models over flat parameter vectors, plus closed-form least squares.

The multilayer perceptron here is written directly against numpy so that a
model's entire state is one flat vector: the unit of checkpointing,
averaging, and serialization.  A network with no hidden layers is a
multinomial linear classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rng import generator

Layout = tuple[tuple[str, tuple[int, ...]], ...]

PVEC_FORMAT = "pvec"
PVEC_VERSION = 1


class SingularSystemError(ValueError):
    """A linear solve hit a singular (or numerically singular) system."""


@dataclass(frozen=True, eq=False)
class ParamVector:
    """All learnable parameters of a model as one flat float64 vector.

    ``layout`` maps named segments (e.g. ``layer0.weight``) to shapes; two
    vectors with identical layouts combine element-wise.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(
            self,
            "layout",
            tuple((str(name), tuple(int(n) for n in shape)) for name, shape in self.layout),
        )
        if values.ndim != 1:
            raise ValueError("values must be a flat vector")
        total = sum(math.prod(shape) for _, shape in self.layout)
        if total != values.size:
            raise ValueError(
                f"layout describes {total} parameters but values has {values.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def _require_same_layout(self, other: "ParamVector"):
        if self.layout != other.layout:
            raise ValueError("parameter vectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._require_same_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._require_same_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def segment(self, name: str) -> np.ndarray:
        """The named segment reshaped to its layout shape (read-only view)."""
        offset = 0
        for seg_name, shape in self.layout:
            size = math.prod(shape)
            if seg_name == name:
                return self.values[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def segments(self) -> dict[str, np.ndarray]:
        return {name: self.segment(name) for name, _ in self.layout}


@dataclass(frozen=True)
class MlpConfig:
    """Fully connected network shape: ``layer_sizes = [d, h_1, ..., C]``."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> Layout:
        layers = []
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            layers.append((f"layer{i}.weight", (n_in, n_out)))
            layers.append((f"layer{i}.bias", (n_out,)))
        return tuple(layers)

    @property
    def param_count(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


def mlp_init(config: MlpConfig, seed: int) -> ParamVector:
    """He-initialized weights (variance ``2 / fan_in``), zero biases."""
    rng = generator(seed, 0)
    parts = []
    for name, shape in config.layout():
        if name.endswith("weight"):
            fan_in = shape[0]
            parts.append(rng.standard_normal(math.prod(shape)) * math.sqrt(2.0 / fan_in))
        else:
            parts.append(np.zeros(math.prod(shape)))
    return ParamVector(np.concatenate(parts), config.layout())


def _unpack(params: ParamVector, config: MlpConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.layout != config.layout():
        raise ValueError("parameter vector layout does not match the model config")
    return [
        (params.segment(f"layer{i}.weight"), params.segment(f"layer{i}.bias"))
        for i in range(len(config.layer_sizes) - 1)
    ]


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def forward_logits(params: ParamVector, config: MlpConfig, features: np.ndarray) -> np.ndarray:
    """Class scores for a batch of feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != config.input_dim:
        raise ValueError(
            f"features must be (batch, {config.input_dim}), got {features.shape}"
        )
    a = features
    weights = _unpack(params, config)
    for w, b in weights[:-1]:
        a = _activate(a @ w + b, config.activation)
    w, b = weights[-1]
    return a @ w + b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict(params: ParamVector, config: MlpConfig, features: np.ndarray) -> np.ndarray:
    """Predicted class ids; ties resolve to the lowest class id."""
    return np.argmax(forward_logits(params, config, features), axis=1)


def loss_and_grad(
    params: ParamVector,
    config: MlpConfig,
    batch: tuple[np.ndarray, np.ndarray],
) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy and its exact gradient.

    Returns the loss and a gradient vector with the same layout as ``params``.
    """
    features, labels = batch
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if features.ndim != 2 or features.shape[1] != config.input_dim:
        raise ValueError(
            f"features must be (batch, {config.input_dim}), got {features.shape}"
        )
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must be one id per batch row")
    n = features.shape[0]
    weights = _unpack(params, config)

    # Forward pass, keeping activations for the backward sweep.
    activations = [features]
    a = features
    for w, b in weights[:-1]:
        a = _activate(a @ w + b, config.activation)
        activations.append(a)
    w, b = weights[-1]
    logits = a @ w + b

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))

    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(weights)  # type: ignore[list-item]
    for i in range(len(weights) - 1, -1, -1):
        grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ weights[i][0].T
            if config.activation == "relu":
                delta = delta * (activations[i] > 0)
            else:
                delta = delta * (1.0 - activations[i] ** 2)

    flat = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
    return loss, ParamVector(flat, params.layout)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """One plain gradient descent update: ``params - lr * grad``."""
    if params.layout != grad.layout:
        raise ValueError("gradient layout does not match the parameter layout")
    return ParamVector(params.values - lr * grad.values, params.layout)


def least_squares_fit(
    X: np.ndarray, y: np.ndarray, jitter: float | str = 0.0
) -> np.ndarray:
    """Solve ``(X'X + jitter I) w = X'y`` by Cholesky factorization.

    ``jitter="auto"`` uses the scale-aware default ``1e-8 * trace(X'X) / d``.
    With ``jitter=0`` the Gram matrix must be invertible.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty matrix")
    if y.shape[0] != X.shape[0]:
        raise ValueError("y must have one entry per row of X")
    d = X.shape[1]
    gram = X.T @ X
    if jitter == "auto":
        jitter = 1e-8 * float(np.trace(gram)) / d
    jitter = float(jitter)
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    system = gram + jitter * np.eye(d)
    rhs = X.T @ y
    try:
        return cho_solve(cho_factor(system), rhs)
    except np.linalg.LinAlgError as exc:
        if jitter == 0.0:
            raise SingularSystemError(
                "X'X is singular; pass jitter > 0 (or jitter='auto') to regularize"
            ) from exc
        raise SingularSystemError(f"system remained singular with jitter {jitter}") from exc


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def save_param_vector(params: ParamVector, path: str | Path):
    """Write ``.pvec``: one JSON layout line, then raw little-endian float64."""
    header = {
        "format": PVEC_FORMAT,
        "version": PVEC_VERSION,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "length": len(params),
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(params.values.astype("<f8").tobytes())


def load_param_vector(path: str | Path) -> ParamVector:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing .pvec header line")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != PVEC_FORMAT:
        raise ValueError(f"{path}: not a .pvec file")
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    values = np.frombuffer(raw, dtype="<f8", offset=newline + 1)
    if values.size != header["length"]:
        raise ValueError(
            f"{path}: expected {header['length']} values, found {values.size}"
        )
    return ParamVector(values.astype(np.float64), layout)
