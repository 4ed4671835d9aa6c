"""Independent oracles used by the tests.

These deliberately avoid the code paths they check: gradients come from
central finite differences on the loss, linear fits from numpy's lstsq,
means from direct summation over stored checkpoints.
"""

from __future__ import annotations

import numpy as np

from chunklab.model import MlpConfig, ParamVector, loss_and_grad


def finite_difference_grad(
    params: ParamVector,
    config: MlpConfig,
    batch: tuple[np.ndarray, np.ndarray],
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of the batch loss, coordinate by coordinate."""
    base = params.values
    grad = np.zeros(base.size)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += step
        minus = base.copy()
        minus[i] -= step
        loss_plus, _ = loss_and_grad(ParamVector(plus, params.layout), config, batch)
        loss_minus, _ = loss_and_grad(ParamVector(minus, params.layout), config, batch)
        grad[i] = (loss_plus - loss_minus) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def one_vs_rest_lsq_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """Train accuracy of a one-vs-rest least-squares linear classifier."""
    n, _ = features.shape
    classes = int(labels.max()) + 1
    design = np.hstack([features, np.ones((n, 1))])
    targets = -np.ones((n, classes))
    targets[np.arange(n), labels] = 1.0
    weights, *_ = np.linalg.lstsq(design, targets, rcond=None)
    predictions = np.argmax(design @ weights, axis=1)
    return float(np.mean(predictions == labels))


def batch_mean(checkpoints) -> np.ndarray:
    """Arithmetic mean of checkpoint values computed the direct way."""
    return np.mean([c.values for c in checkpoints], axis=0)
