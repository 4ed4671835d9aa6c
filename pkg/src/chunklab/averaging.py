"""Running averages of end-of-chunk weights.

The average is maintained alongside training but never fed back into it: it
is a drop-in replacement for the final weights at evaluation time only.  Two
modes exist:

* ``mean`` -- the running arithmetic mean of all checkpoints so far,
  maintained incrementally as ``avg <- ((k-1)/k) avg + (1/k) theta_k``.
* ``ema``  -- an exponential moving average ``avg <- alpha avg + (1-alpha)
  theta_k``, seeded with the first checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ParamVector

MODE_MEAN = "mean"
MODE_EMA = "ema"


@dataclass(frozen=True, eq=False)
class AveragerState:
    """Running per-chunk weight average; value-semantic and immutable."""

    mode: str
    alpha: float | None = None
    average: ParamVector | None = None
    chunk_count: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_MEAN, MODE_EMA):
            raise ValueError(f"unknown averaging mode {self.mode!r}")
        if self.mode == MODE_EMA:
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("ema mode requires alpha in [0, 1]")
        elif self.alpha is not None:
            raise ValueError("alpha is only meaningful in ema mode")
        if self.chunk_count < 0:
            raise ValueError("chunk_count must be >= 0")


def new_averager(spec: str) -> AveragerState:
    """Build an empty averager from a spec string: ``mean`` or ``ema:<alpha>``."""
    if spec == MODE_MEAN:
        return AveragerState(mode=MODE_MEAN)
    if spec.startswith(MODE_EMA + ":"):
        return AveragerState(mode=MODE_EMA, alpha=float(spec.split(":", 1)[1]))
    raise ValueError(f"unknown averager spec {spec!r} (expected 'mean' or 'ema:<alpha>')")


def avg_update(state: AveragerState, checkpoint: ParamVector) -> AveragerState:
    """Fold one end-of-chunk checkpoint into the average."""
    k = state.chunk_count + 1
    if state.average is None:
        # First checkpoint defines the average in both modes.
        return AveragerState(state.mode, state.alpha, checkpoint, 1)
    if state.average.layout != checkpoint.layout:
        raise ValueError("checkpoint layout does not match the averaged layout")
    if state.mode == MODE_MEAN:
        updated = ((k - 1) / k) * state.average + (1.0 / k) * checkpoint
    else:
        updated = state.alpha * state.average + (1.0 - state.alpha) * checkpoint
    return AveragerState(state.mode, state.alpha, updated, k)


def avg_get(state: AveragerState) -> ParamVector:
    """The current averaged weights; requires at least one update."""
    if state.average is None:
        raise ValueError("averager has no checkpoints yet")
    return state.average


def average_checkpoints(
    checkpoints: "tuple[ParamVector, ...] | list[ParamVector]", option: str
) -> ParamVector:
    """Evaluation weights for one reporting option.

    ``"none"`` returns the final checkpoint unchanged; ``"mean"`` and
    ``"ema:<alpha>"`` fold every checkpoint into a fresh averager first.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    if option == "none":
        return checkpoints[-1]
    state = new_averager(option)
    for checkpoint in checkpoints:
        state = avg_update(state, checkpoint)
    return avg_get(state)
