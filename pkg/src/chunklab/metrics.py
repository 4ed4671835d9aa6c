"""Measurement protocols: accuracy matrices, forgetting, stability dips,
and the chunking-proportion decomposition.

Chunk indices in this module are 1-based ordinals into the stream ("the 5th
chunk"), matching how tracked chunks are usually referred to.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .averaging import avg_get, avg_update, new_averager
from .data import ChunkStream, LabeledDataset
from .model import MlpConfig
from .output import atomic_write_csv
from .trainer import RunLog, evaluate, evaluate_dataset


class UndefinedProportionError(ValueError):
    """No offline-to-CL drop exists, so the decomposition is undefined."""


def chunking_proportion(offline_acc: float, chunking_acc: float, cl_acc: float) -> float:
    """Percentage of the offline-to-CL accuracy drop explained by chunking.

    ``100 * (offline - chunking) / (offline - cl)``; requires a genuine drop
    (``offline > cl``).
    """
    if offline_acc <= cl_acc:
        raise UndefinedProportionError(
            f"offline accuracy {offline_acc} must exceed the CL accuracy {cl_acc}"
        )
    return 100.0 * (offline_acc - chunking_acc) / (offline_acc - cl_acc)


@dataclass(frozen=True, eq=False)
class AccuracyMatrix:
    """End-of-chunk accuracies: one row per chunk, column 0 is the test set,
    column ``1 + i`` is the training data of ``tracked_chunks[i]``."""

    values: np.ndarray
    tracked_chunks: tuple[int, ...]

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tracked_chunks", tuple(int(j) for j in self.tracked_chunks))
        if values.ndim != 2 or values.shape[1] != len(self.tracked_chunks) + 1:
            raise ValueError("matrix must have one test column plus one per tracked chunk")
        if values.size and (values.min() < 0 or values.max() > 1):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def n_chunks(self) -> int:
        return self.values.shape[0]

    def test_accuracy(self, chunk_end: int) -> float:
        return float(self.values[chunk_end - 1, 0])

    def tracked_accuracy(self, chunk_end: int, tracked: int) -> float:
        col = 1 + self.tracked_chunks.index(tracked)
        return float(self.values[chunk_end - 1, col])


def default_tracked_chunks(n_chunks: int) -> tuple[int, ...]:
    """The 10%-, 40%-, and 80%-position chunks of a stream (1-based, deduped)."""
    picks = []
    for fraction in (0.1, 0.4, 0.8):
        j = min(n_chunks, max(1, round(fraction * n_chunks)))
        if j not in picks:
            picks.append(j)
    return tuple(picks)


def accuracy_matrix(
    runlog: RunLog,
    stream: ChunkStream,
    tracked: "tuple[int, ...] | list[int]",
    dataset: LabeledDataset,
    test: LabeledDataset,
    config: MlpConfig,
    averager: str | None = None,
) -> AccuracyMatrix:
    """Evaluate every end-of-chunk checkpoint on the tracked chunks and test set.

    With ``averager`` (``"mean"`` or ``"ema:<alpha>"``) the row for chunk k is
    measured with the running average of checkpoints 1..k instead of
    checkpoint k itself; training is unaffected either way.
    """
    if runlog.n_chunks != stream.n_chunks:
        raise ValueError("run log and stream disagree on the number of chunks")
    tracked = tuple(int(j) for j in tracked)
    for j in tracked:
        if not 1 <= j <= stream.n_chunks:
            raise ValueError(f"tracked chunk {j} is out of range 1..{stream.n_chunks}")
    state = new_averager(averager) if averager is not None else None
    rows = np.empty((runlog.n_chunks, 1 + len(tracked)))
    for i, checkpoint in enumerate(runlog.checkpoints):
        if state is not None:
            state = avg_update(state, checkpoint)
            weights = avg_get(state)
        else:
            weights = checkpoint
        rows[i, 0] = evaluate_dataset(weights, config, test)
        for col, j in enumerate(tracked, start=1):
            rows[i, col] = evaluate(weights, config, stream.chunks[j - 1], dataset)
    return AccuracyMatrix(rows, tracked)


class ForgettingEntry(NamedTuple):
    chunk_end: int  # measurement row k (1-based)
    tracked: int  # tracked chunk j
    drop: float  # accuracy on j right after training it minus accuracy now
    gap_to_test: float  # accuracy on j now minus test accuracy now


def forgetting_report(matrix: AccuracyMatrix) -> tuple[ForgettingEntry, ...]:
    """Per-tracked-chunk forgetting curves from an accuracy matrix.

    For tracked chunk j and every k >= j: ``drop = A[j][j] - A[k][j]`` (zero
    at k = j by construction) and ``gap_to_test = A[k][j] - A[k][test]``.
    """
    entries = []
    for j in matrix.tracked_chunks:
        own = matrix.tracked_accuracy(j, j)
        for k in range(j, matrix.n_chunks + 1):
            now = matrix.tracked_accuracy(k, j)
            entries.append(ForgettingEntry(k, j, own - now, now - matrix.test_accuracy(k)))
    return tuple(entries)


@dataclass(frozen=True, eq=False)
class StabilityTrace:
    """A sampled test-accuracy curve with chunk-start markers.

    ``samples`` are ``(completed_updates, accuracy)`` pairs sorted by step;
    ``window`` is how many post-boundary steps a dip is searched in.
    """

    samples: tuple[tuple[int, float], ...]
    boundaries: tuple[int, ...]
    window: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple((int(s), float(a)) for s, a in self.samples))
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if self.window < 1:
            raise ValueError("window must be >= 1")
        steps = [s for s, _ in self.samples]
        if any(a > b for a, b in zip(steps, steps[1:])):
            raise ValueError("samples must be sorted by step")
        if not self.samples:
            raise ValueError("trace has no samples")
        if self.boundaries and self.boundaries[-1] > steps[-1]:
            raise ValueError("a boundary lies beyond the sampled range")

    @classmethod
    def from_run_log(cls, log: RunLog, window: int = 50) -> "StabilityTrace":
        if not log.eval_trace:
            raise ValueError("run log has no evaluation trace; set eval_every_steps > 0")
        return cls(log.eval_trace, log.chunk_boundaries, window)


class BoundaryDip(NamedTuple):
    boundary: int  # step at which the chunk begins
    dip: float  # accuracy just before minus the minimum within the window


def stability_gap(trace: StabilityTrace) -> tuple[BoundaryDip, ...]:
    """Accuracy dip after each chunk boundary (the first boundary has none).

    Dip = accuracy at the last sample at-or-before the boundary minus the
    minimum accuracy over samples within ``window`` steps after it; the
    window is truncated at the end of the trace.
    """
    steps = np.asarray([s for s, _ in trace.samples])
    accs = np.asarray([a for _, a in trace.samples])
    dips = []
    for boundary in trace.boundaries[1:]:
        before = np.flatnonzero(steps <= boundary)
        if before.size == 0:
            raise ValueError(f"no sample at or before the boundary at step {boundary}")
        inside = np.flatnonzero((steps > boundary) & (steps <= boundary + trace.window))
        if inside.size == 0:
            continue  # boundary at the very end of the trace
        dips.append(BoundaryDip(int(boundary), float(accs[before[-1]] - accs[inside].min())))
    return tuple(dips)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_accuracy_matrix_csv(matrix: AccuracyMatrix, path: str | Path):
    header = ["chunk_end", "test"] + [f"acc_chunk_{j}" for j in matrix.tracked_chunks]
    rows = [
        [k, *(float(v) for v in matrix.values[k - 1])]
        for k in range(1, matrix.n_chunks + 1)
    ]
    atomic_write_csv(path, header, rows)


def write_forgetting_csv(entries: "tuple[ForgettingEntry, ...]", path: str | Path):
    atomic_write_csv(
        path,
        ["k", "j", "F", "G"],
        [[e.chunk_end, e.tracked, e.drop, e.gap_to_test] for e in entries],
    )


def write_stability_csv(dips: "tuple[BoundaryDip, ...]", path: str | Path):
    atomic_write_csv(path, ["boundary", "dip"], [[d.boundary, d.dip] for d in dips])
