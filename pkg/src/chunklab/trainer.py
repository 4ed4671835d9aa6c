"""Chunked training loops, the experience-replay baseline, and evaluation.

A run walks the chunks of a stream in order, never revisiting one.  In the
``standard`` regime each chunk is trained for a fixed number of epochs of
shuffled mini-batches; in the ``online`` regime every mini-batch updates the
learner exactly once (a single pass, epochs forced to 1).

Time axis conventions shared by all traces: ``chunk_boundaries[c]`` is the
number of completed updates when chunk ``c`` begins, evaluation samples are
``(completed_updates, test_accuracy)`` pairs, and the loss of the t-th
update (1-based) is logged at step ``t``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import ChunkStream, LabeledDataset
from .model import (
    MlpConfig,
    ParamVector,
    load_param_vector,
    loss_and_grad,
    predict,
    save_param_vector,
    sgd_step,
)
from .rng import generator

METHOD_PLAIN_SGD = "plain-sgd"
METHOD_ER = "er"

REGIME_STANDARD = "standard"
REGIME_ONLINE = "online"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one chunked training run.

    Defaults follow the reference recipe: mini-batch 32, learning rate 0.1,
    replay batch 32.  ``eval_every_steps=0`` disables the test-accuracy trace.
    """

    epochs_per_chunk: int = 1
    batch_size: int = 32
    lr: float = 0.1
    method: str = METHOD_PLAIN_SGD
    memory_size: int = 0
    replay_batch: int = 32
    eval_every_steps: int = 0
    regime: str = REGIME_STANDARD

    def __post_init__(self):
        if self.regime not in (REGIME_STANDARD, REGIME_ONLINE):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.method not in (METHOD_PLAIN_SGD, METHOD_ER):
            raise ValueError(f"unknown method {self.method!r}")
        if self.regime == REGIME_ONLINE:
            # Single-pass semantics: every mini-batch is seen exactly once.
            object.__setattr__(self, "epochs_per_chunk", 1)
        if self.epochs_per_chunk < 1:
            raise ValueError("epochs_per_chunk must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.replay_batch < 1:
            raise ValueError("replay_batch must be >= 1")
        if self.memory_size < 0 or self.eval_every_steps < 0:
            raise ValueError("counts must be >= 0")


class ReplayBuffer:
    """Fixed-capacity memory filled by reservoir sampling.

    After ``seen_count`` offers the buffer holds ``min(seen_count, capacity)``
    items, and every offered item is retained with equal probability.
    """

    def __init__(self, capacity: int, feature_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.features = np.zeros((capacity, feature_dim))
        self.labels = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.seen_count = 0

    def copy(self) -> "ReplayBuffer":
        dup = ReplayBuffer(self.capacity, self.features.shape[1])
        dup.features = self.features.copy()
        dup.labels = self.labels.copy()
        dup.size = self.size
        dup.seen_count = self.seen_count
        return dup

    def offer(self, feature: np.ndarray, label: int, rng: np.random.Generator):
        """Reservoir policy: store while filling, then replace a random slot
        with probability ``capacity / seen_count``."""
        self.seen_count += 1
        if self.size < self.capacity:
            self.features[self.size] = feature
            self.labels[self.size] = label
            self.size += 1
        else:
            j = int(rng.integers(0, self.seen_count))
            if j < self.capacity:
                self.features[j] = feature
                self.labels[j] = label

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform sample of ``n`` stored items.

        Drawn without replacement when the buffer holds at least ``n`` items,
        with replacement otherwise.
        """
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(self.size, size=n, replace=self.size < n)
        return self.features[idx], self.labels[idx]


def reservoir_update(
    buffer: ReplayBuffer, item: tuple[np.ndarray, int], rng: np.random.Generator
) -> ReplayBuffer:
    """Pure form of the reservoir policy: returns an updated copy."""
    updated = buffer.copy()
    updated.offer(np.asarray(item[0], dtype=np.float64), int(item[1]), rng)
    return updated


@dataclass(frozen=True, eq=False)
class RunLog:
    """Everything a finished run exposes for measurement."""

    checkpoints: tuple[ParamVector, ...]
    step_losses: np.ndarray
    eval_trace: tuple[tuple[int, float], ...]
    chunk_boundaries: tuple[int, ...]

    def __post_init__(self):
        losses = np.ascontiguousarray(np.asarray(self.step_losses, dtype=np.float64))
        losses.setflags(write=False)
        object.__setattr__(self, "step_losses", losses)
        object.__setattr__(self, "eval_trace", tuple((int(s), float(a)) for s, a in self.eval_trace))
        object.__setattr__(self, "chunk_boundaries", tuple(int(b) for b in self.chunk_boundaries))
        if len(self.checkpoints) != len(self.chunk_boundaries):
            raise ValueError("one checkpoint per chunk is required")
        if any(b >= c for b, c in zip(self.chunk_boundaries, self.chunk_boundaries[1:])):
            raise ValueError("chunk boundaries must be strictly increasing")

    @property
    def n_chunks(self) -> int:
        return len(self.checkpoints)

    @property
    def final_params(self) -> ParamVector:
        return self.checkpoints[-1]


def evaluate(
    params: ParamVector,
    config: MlpConfig,
    subset: np.ndarray,
    dataset: LabeledDataset,
) -> float:
    """Fraction of correct argmax predictions on the given rows.

    Ties between equal logits resolve toward the lowest class id.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValueError("cannot evaluate on an empty subset")
    features, labels = dataset.batch(subset)
    return float(np.mean(predict(params, config, features) == labels))


def evaluate_dataset(params: ParamVector, config: MlpConfig, dataset: LabeledDataset) -> float:
    """Accuracy over every row of a dataset."""
    return evaluate(params, config, np.arange(len(dataset)), dataset)


def train_on_stream(
    init: ParamVector,
    config: MlpConfig,
    stream: ChunkStream,
    dataset: LabeledDataset,
    test: LabeledDataset,
    tc: TrainConfig,
    seed: int,
    on_chunk_end: Callable[[int, ParamVector, ReplayBuffer | None], None] | None = None,
) -> RunLog:
    """Train through the stream's chunks in order and log the run.

    Each chunk gets ``epochs_per_chunk`` passes of shuffled mini-batches (the
    final short batch is kept).  With ``method="er"`` every batch is extended
    by a uniform sample from the replay memory (skipped while it is empty),
    and the memory is reservoir-updated with the chunk's examples: once at
    chunk end in the standard regime, after each batch in the online regime.
    """
    m = len(dataset)
    for chunk in stream.chunks:
        if chunk.size == 0:
            raise ValueError("stream contains an empty chunk")
        if chunk.min() < 0 or chunk.max() >= m:
            raise ValueError("stream indices fall outside the dataset")
    use_replay = tc.method == METHOD_ER
    if use_replay and tc.memory_size < 1:
        raise ValueError("method 'er' requires memory_size >= 1")
    if tc.eval_every_steps > 0 and len(test) == 0:
        raise ValueError("eval_every_steps > 0 requires a non-empty test set")

    rng = generator(seed, 0)
    buffer = ReplayBuffer(tc.memory_size, dataset.feature_dim) if use_replay else None

    params = init
    steps = 0
    step_losses: list[float] = []
    eval_trace: list[tuple[int, float]] = []
    boundaries: list[int] = []
    checkpoints: list[ParamVector] = []

    if tc.eval_every_steps > 0:
        eval_trace.append((0, evaluate_dataset(params, config, test)))

    for chunk_index, chunk in enumerate(stream.chunks):
        boundaries.append(steps)
        for _ in range(tc.epochs_per_chunk):
            order = rng.permutation(chunk)
            for start in range(0, order.size, tc.batch_size):
                batch_idx = order[start : start + tc.batch_size]
                bx, by = dataset.batch(batch_idx)
                if use_replay and buffer.size > 0:
                    rx, ry = buffer.sample(tc.replay_batch, rng)
                    bx = np.concatenate([bx, rx])
                    by = np.concatenate([by, ry])
                loss, grad = loss_and_grad(params, config, (bx, by))
                params = sgd_step(params, grad, tc.lr)
                steps += 1
                step_losses.append(loss)
                if use_replay and tc.regime == REGIME_ONLINE:
                    for row in batch_idx:
                        buffer.offer(dataset.features[row], int(dataset.labels[row]), rng)
                if tc.eval_every_steps > 0 and steps % tc.eval_every_steps == 0:
                    eval_trace.append((steps, evaluate_dataset(params, config, test)))
        if use_replay and tc.regime == REGIME_STANDARD:
            # Offer each example once per chunk; per-epoch offers would bias
            # the reservoir's seen count toward revisited data.
            for row in chunk:
                buffer.offer(dataset.features[row], int(dataset.labels[row]), rng)
        checkpoints.append(params)
        if on_chunk_end is not None:
            on_chunk_end(chunk_index, params, buffer)

    return RunLog(
        checkpoints=tuple(checkpoints),
        step_losses=np.asarray(step_losses),
        eval_trace=tuple(eval_trace),
        chunk_boundaries=tuple(boundaries),
    )


# ---------------------------------------------------------------------------
# run log files
# ---------------------------------------------------------------------------


def save_run_log(log: RunLog, directory: str | Path):
    """Write a run as metadata JSON, per-chunk ``.pvec`` files, and CSV traces."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, checkpoint in enumerate(log.checkpoints, start=1):
        name = f"checkpoint_{i:04d}.pvec"
        save_param_vector(checkpoint, directory / name)
        names.append(name)
    meta = {
        "n_chunks": log.n_chunks,
        "chunk_boundaries": list(log.chunk_boundaries),
        "n_steps": int(log.step_losses.size),
        "checkpoints": names,
    }
    (directory / "run.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with (directory / "losses.csv").open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(log.step_losses, start=1):
            writer.writerow([i, repr(float(loss))])
    with (directory / "eval.csv").open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "test_acc"])
        for step, acc in log.eval_trace:
            writer.writerow([step, repr(acc)])


def load_run_log(directory: str | Path) -> RunLog:
    directory = Path(directory)
    meta = json.loads((directory / "run.json").read_text(encoding="utf-8"))
    checkpoints = tuple(load_param_vector(directory / name) for name in meta["checkpoints"])
    with (directory / "losses.csv").open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    losses = np.asarray([float(loss) for _, loss in rows[1:]])
    with (directory / "eval.csv").open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    trace = tuple((int(step), float(acc)) for step, acc in rows[1:])
    return RunLog(
        checkpoints=checkpoints,
        step_losses=losses,
        eval_trace=trace,
        chunk_boundaries=tuple(meta["chunk_boundaries"]),
    )
