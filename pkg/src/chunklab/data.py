"""Datasets, synthetic generators, and chunk stream construction.

A chunk stream is an ordered partition of a training set's row indices.
Three stream modes are supported:

* ``iid-balanced``    -- equal-size chunks with identical per-class counts,
  built by cyclically dealing a class-ordered shuffle into chunks.
* ``iid-unbalanced``  -- a uniform random permutation cut into near-equal
  slices, with no class constraint.
* ``class-incremental`` -- each chunk holds all training data of a disjoint
  class subset, in ascending class order.

All builders are pure functions of ``(inputs, seed)``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import generator

MODE_IID_BALANCED = "iid-balanced"
MODE_IID_UNBALANCED = "iid-unbalanced"
MODE_CLASS_INCREMENTAL = "class-incremental"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class InsufficientClassDataError(ValueError):
    """A class has fewer examples than an operation requires."""

    def __init__(self, class_id: int, have: int, need: int):
        self.class_id = class_id
        self.have = have
        self.need = need
        super().__init__(
            f"class {class_id} has {have} examples but {need} are required"
        )

    def __reduce__(self):  # survives worker-pool pickling
        return (InsufficientClassDataError, (self.class_id, self.have, self.need))


class BalanceInfeasibleError(ValueError):
    """Requested chunk size cannot produce fully balanced chunks."""

    def __init__(self, chunk_size: int, reason: str, largest_feasible: int | None):
        self.chunk_size = chunk_size
        self.reason = reason
        self.largest_feasible = largest_feasible
        hint = (
            f"; largest feasible chunk size <= {chunk_size} is {largest_feasible}"
            if largest_feasible is not None
            else "; no feasible chunk size exists for this dataset"
        )
        super().__init__(f"chunk size {chunk_size} infeasible: {reason}{hint}")

    def __reduce__(self):  # survives worker-pool pickling
        return (BalanceInfeasibleError, (self.chunk_size, self.reason, self.largest_feasible))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """A dense feature matrix with integer class labels in ``[0, class_count)``."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = _frozen(np.asarray(self.features, dtype=np.float64))
        labels = _frozen(np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must be a vector with one entry per feature row")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if labels.size:
            if labels.min() < 0 or labels.max() >= self.class_count:
                raise ValueError("labels must lie in [0, class_count)")
            present = np.unique(labels)
            if present.size != self.class_count:
                missing = sorted(set(range(self.class_count)) - set(present.tolist()))
                raise ValueError(f"classes {missing} have no examples")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        """Number of examples per class id, length ``class_count``."""
        return np.bincount(self.labels, minlength=self.class_count)

    def batch(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(features, labels) for the given row indices."""
        return self.features[indices], self.labels[indices]


@dataclass(frozen=True, eq=False)
class ChunkStream:
    """Ordered, pairwise-disjoint chunks of row indices into one training set."""

    chunks: tuple[np.ndarray, ...]
    mode: str
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "chunks", tuple(_frozen(np.asarray(c, dtype=np.int64)) for c in self.chunks)
        )
        if self.mode not in (MODE_IID_BALANCED, MODE_IID_UNBALANCED, MODE_CLASS_INCREMENTAL):
            raise ValueError(f"unknown stream mode {self.mode!r}")
        if any(c.size == 0 for c in self.chunks):
            raise ValueError("chunks must be non-empty")
        joined = np.concatenate(self.chunks) if self.chunks else np.empty(0, dtype=np.int64)
        if np.unique(joined).size != joined.size:
            raise ValueError("chunks must be pairwise disjoint")

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    @property
    def n_indices(self) -> int:
        return sum(c.size for c in self.chunks)

    def all_indices(self) -> np.ndarray:
        return np.concatenate(self.chunks)


@dataclass(frozen=True, eq=False)
class RegressionChunkSet:
    """Equal-size regression chunks with norm-bounded rows and targets.

    Every row x satisfies ``||x||_2 <= truncation_radius`` and every chunk
    target vector y satisfies ``||y||_2 <= target_bound``.
    """

    xs: tuple[np.ndarray, ...]
    ys: tuple[np.ndarray, ...]
    truncation_radius: float
    target_bound: float
    true_weights: np.ndarray
    noise_sd: float
    covariance: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "xs", tuple(_frozen(x) for x in self.xs))
        object.__setattr__(self, "ys", tuple(_frozen(y) for y in self.ys))
        object.__setattr__(self, "true_weights", _frozen(self.true_weights))
        if self.covariance is not None:
            object.__setattr__(self, "covariance", _frozen(self.covariance))
        sizes = {x.shape for x in self.xs}
        if len(sizes) != 1:
            raise ValueError("all chunks must have identical shape")
        for x in self.xs:
            norms = np.linalg.norm(x, axis=1)
            if norms.size and norms.max() > self.truncation_radius * (1 + 1e-12):
                raise ValueError("a row exceeds the truncation radius")
        for y in self.ys:
            if np.linalg.norm(y) > self.target_bound * (1 + 1e-12):
                raise ValueError("a target vector exceeds the target bound")

    @property
    def n_chunks(self) -> int:
        return len(self.xs)

    @property
    def chunk_size(self) -> int:
        return self.xs[0].shape[0]

    @property
    def dim(self) -> int:
        return self.xs[0].shape[1]

    def concatenated(self) -> tuple[np.ndarray, np.ndarray]:
        """All chunks stacked into one design matrix and target vector."""
        return np.concatenate(self.xs, axis=0), np.concatenate(self.ys)


# ---------------------------------------------------------------------------
# train/test reservation and stream builders
# ---------------------------------------------------------------------------


def split_train_test(
    dataset: LabeledDataset, per_class_test: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Reserve ``per_class_test`` examples of every class as a held-out test set.

    The remaining rows form the training set.  Deterministic in ``seed``.
    """
    if per_class_test < 0:
        raise ValueError("per_class_test must be >= 0")
    rng = generator(seed, 0)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for c in range(dataset.class_count):
        rows = np.flatnonzero(dataset.labels == c)
        if rows.size < per_class_test:
            raise InsufficientClassDataError(c, rows.size, per_class_test)
        rows = rng.permutation(rows)
        test_idx.append(rows[:per_class_test])
        train_idx.append(rows[per_class_test:])
    train_rows = np.sort(np.concatenate(train_idx))
    test_rows = np.sort(np.concatenate(test_idx))
    train = LabeledDataset(
        dataset.features[train_rows], dataset.labels[train_rows], dataset.class_count
    )
    if per_class_test == 0:
        test = LabeledDataset(
            np.empty((0, dataset.feature_dim)), np.empty(0, dtype=np.int64), dataset.class_count
        )
    else:
        test = LabeledDataset(
            dataset.features[test_rows], dataset.labels[test_rows], dataset.class_count
        )
    return train, test


def default_per_class_test(per_class_count: int) -> int:
    """Default test reservation: 20% of the per-class count, rounded down."""
    return per_class_count // 5


def _largest_feasible_chunk_size(class_counts: np.ndarray, limit: int) -> int | None:
    total = int(class_counts.sum())
    n_classes = class_counts.size
    for size in range(min(limit, total), 0, -1):
        if total % size:
            continue
        n_chunks = total // size
        if size % n_classes:
            continue
        if np.all(class_counts % n_chunks == 0):
            return size
    return None


def build_balanced_stream(train: LabeledDataset, chunk_size: int, seed: int) -> ChunkStream:
    """Deal the training set into equal, fully class-balanced chunks.

    Construction: shuffle each class, lay the classes out in ascending-id
    order, deal the resulting list cyclically into ``len(train) // chunk_size``
    chunks, then shuffle within each chunk and shuffle the chunk order.
    """
    m = len(train)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if m // chunk_size < 1:
        raise ValueError(f"chunk_size {chunk_size} exceeds the training set size {m}")
    counts = train.class_counts()

    def fail(reason: str):
        largest = _largest_feasible_chunk_size(counts, chunk_size)
        if largest is None:
            largest = _largest_feasible_chunk_size(counts, m)
        raise BalanceInfeasibleError(chunk_size, reason, largest)

    if m % chunk_size:
        fail(f"training size {m} is not divisible by the chunk size")
    n_chunks = m // chunk_size
    if chunk_size % train.class_count:
        fail(f"chunk size is not divisible by the class count {train.class_count}")
    bad = np.flatnonzero(counts % n_chunks)
    if bad.size:
        fail(
            f"class {int(bad[0])} count {int(counts[bad[0]])} is not divisible by "
            f"the chunk count {n_chunks}"
        )

    rng = generator(seed, 0)
    ordered = np.concatenate(
        [rng.permutation(np.flatnonzero(train.labels == c)) for c in range(train.class_count)]
    )
    # Cyclic deal: list position p lands in chunk p mod n_chunks.
    chunks = [ordered[start::n_chunks] for start in range(n_chunks)]
    chunks = [rng.permutation(c) for c in chunks]
    order = rng.permutation(n_chunks)
    return ChunkStream(tuple(chunks[i] for i in order), MODE_IID_BALANCED, seed)


def build_unbalanced_stream(train: LabeledDataset, n_chunks: int, seed: int) -> ChunkStream:
    """Split a uniform permutation of the training set into near-equal slices."""
    m = len(train)
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    if n_chunks > m:
        raise ValueError(f"n_chunks {n_chunks} exceeds the training set size {m}")
    rng = generator(seed, 0)
    order = rng.permutation(m)
    slices = np.array_split(order, n_chunks)  # sizes differ by at most one
    return ChunkStream(tuple(slices), MODE_IID_UNBALANCED, seed)


def build_task_stream(train: LabeledDataset, classes_per_task: int, seed: int) -> ChunkStream:
    """One chunk per disjoint class subset, in ascending class order."""
    if classes_per_task < 1:
        raise ValueError("classes_per_task must be >= 1")
    if train.class_count % classes_per_task:
        raise ValueError(
            f"class count {train.class_count} is not divisible by "
            f"classes_per_task {classes_per_task}"
        )
    rng = generator(seed, 0)
    chunks = []
    for first in range(0, train.class_count, classes_per_task):
        members = np.flatnonzero(
            (train.labels >= first) & (train.labels < first + classes_per_task)
        )
        chunks.append(rng.permutation(members))
    return ChunkStream(tuple(chunks), MODE_CLASS_INCREMENTAL, seed)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _mean_chord_factor(d: int) -> float:
    """Expected distance between two uniform points on the unit sphere in R^d."""
    if d == 1:
        return 1.0  # points are +-1; mean |u - v| over the 4 equally likely pairs
    a = (d - 1) / 2.0
    b = d / 2.0
    log_num = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    log_den = 2 * math.lgamma(a) - math.lgamma(2 * a)
    return 2.0 * math.exp(log_num - log_den)


def gaussian_blobs(
    d: int,
    class_count: int,
    per_class: int,
    separation: float,
    seed: int,
    max_center_draws: int = 200_000,
) -> LabeledDataset:
    """Isotropic unit-variance Gaussian clusters with well-separated centers.

    Centers are drawn uniformly on the sphere whose radius makes the expected
    pairwise center distance equal ``separation``, redrawing until every
    pairwise distance is at least ``separation``.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be > 0")

    rng = generator(seed, 0)
    radius = separation / _mean_chord_factor(d)
    centers = None
    for _ in range(max_center_draws):
        cand = rng.standard_normal((class_count, d))
        cand *= radius / np.linalg.norm(cand, axis=1, keepdims=True)
        diff = cand[:, None, :] - cand[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        if dist[np.triu_indices(class_count, k=1)].min() >= separation:
            centers = cand
            break
    if centers is None:
        raise ValueError(
            f"could not place {class_count} centers at pairwise distance >= "
            f"{separation} in {d} dimensions; reduce class_count or separation"
        )

    features = np.empty((class_count * per_class, d))
    labels = np.empty(class_count * per_class, dtype=np.int64)
    for c in range(class_count):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = centers[c] + rng.standard_normal((per_class, d))
        labels[block] = c
    return LabeledDataset(features, labels, class_count)


def regression_chunks(
    d: int,
    chunk_size: int,
    n_chunks: int,
    a_x: float,
    noise_sd: float,
    seed: int,
    lambda_min: float = 0.2,
) -> RegressionChunkSet:
    """Sample equal-size regression chunks from a norm-truncated Gaussian.

    Rows are drawn from a zero-mean Gaussian whose covariance is diagonal with
    eigenvalues linearly spaced in ``[lambda_min, 1]``, rejection-resampled to
    ``||x||_2 <= a_x`` (bounded, hence sub-Gaussian).  Targets are
    ``y_t = X_t w* + noise`` with ``w*`` drawn once from the unit sphere; the
    recorded target bound is the realized maximum of ``||y_t||_2``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if chunk_size < d:
        raise ValueError("chunk_size must be >= d so per-chunk least squares exists")
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    if a_x <= 0:
        raise ValueError("a_x must be > 0")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    if not 0 < lambda_min <= 1:
        raise ValueError("lambda_min must be in (0, 1]")

    rng = generator(seed, 0)
    eigenvalues = np.linspace(lambda_min, 1.0, d)
    scale = np.sqrt(eigenvalues)
    covariance = np.diag(eigenvalues)

    w = rng.standard_normal(d)
    true_weights = w / np.linalg.norm(w)

    needed = chunk_size * n_chunks
    accepted: list[np.ndarray] = []
    n_accepted = 0
    n_proposed = 0
    while n_accepted < needed:
        batch = max(1024, needed - n_accepted)
        draw = rng.standard_normal((batch, d)) * scale
        keep = draw[np.linalg.norm(draw, axis=1) <= a_x]
        n_proposed += batch
        n_accepted += keep.shape[0]
        accepted.append(keep)
        if n_proposed >= 100_000 and n_accepted < 0.001 * n_proposed:
            raise ValueError(
                f"truncation radius a_x={a_x} rejects more than 99.9% of samples"
            )
    rows = np.concatenate(accepted)[:needed]

    xs = []
    ys = []
    for t in range(n_chunks):
        x = rows[t * chunk_size : (t + 1) * chunk_size]
        y = x @ true_weights
        if noise_sd > 0:
            y = y + noise_sd * rng.standard_normal(chunk_size)
        xs.append(x)
        ys.append(y)
    a_y = max(float(np.linalg.norm(y)) for y in ys)
    return RegressionChunkSet(
        xs=tuple(xs),
        ys=tuple(ys),
        truncation_radius=a_x,
        target_bound=a_y,
        true_weights=true_weights,
        noise_sd=noise_sd,
        covariance=covariance,
    )


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def load_csv_dataset(path: str | Path) -> LabeledDataset:
    """Read a ``f0,...,f{d-1},label`` CSV into a dataset.

    Features are parsed as 64-bit floats and the label as a non-negative
    integer.  LF and CRLF line endings are both accepted.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or header != expected:
            raise ValueError(
                f"{path}: header must be f0,...,f{{d-1}},label, got {','.join(header)}"
            )
        features = []
        labels = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            features.append([float(v) for v in row[:d]])
            label = int(row[d])
            if label < 0:
                raise ValueError(f"{path}:{lineno}: label must be non-negative")
            labels.append(label)
    if not labels:
        raise ValueError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(np.asarray(features), labels_arr, int(labels_arr.max()) + 1)


def _read_idx(path: Path, expected_magic: int, n_dims: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = path.read_bytes()
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{n_dims}i", raw[4:header_len])
    count = math.prod(dims)
    body = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if body.size != count:
        raise ValueError(f"{path}: expected {count} bytes of data, found {body.size}")
    return dims, body


def load_idx_dataset(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Read an MNIST-style big-endian IDX image/label file pair.

    Images are flattened to rows and scaled from byte range to ``[0, 1]``.
    """
    (n, rows, cols), pixels = _read_idx(Path(images_path), IDX_IMAGE_MAGIC, 3)
    (n_labels,), labels = _read_idx(Path(labels_path), IDX_LABEL_MAGIC, 1)
    if n != n_labels:
        raise ValueError(f"image count {n} does not match label count {n_labels}")
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels_arr = labels.astype(np.int64)
    return LabeledDataset(features, labels_arr, int(labels_arr.max()) + 1)
