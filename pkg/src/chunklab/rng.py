"""Seeded random number streams.

All stochastic operations in this package take an explicit integer seed and
derive their randomness from a counter-based Philox generator, so every
builder and training run is a pure function of its inputs.  Independent
sub-streams (e.g. one per training chunk, or one per sweep cell) are derived
by extending the seed with stream labels, never by sharing generator state.
"""

from __future__ import annotations

import numpy as np


def generator(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator for ``seed``, optionally on a labelled sub-stream.

    ``generator(s)``, ``generator(s, 0)``, ``generator(s, 1)`` ... are
    statistically independent and individually reproducible.
    """
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seq = np.random.SeedSequence((int(seed), *[int(s) for s in stream]))
    return np.random.Generator(np.random.Philox(seq))


def child_seeds(seed: int, n: int) -> tuple[int, ...]:
    """Derive ``n`` independent integer seeds from one base seed.

    Used when a pipeline feeds several seeded operations (dataset, split,
    stream, init, training) from a single experiment seed without letting
    their internal streams coincide.
    """
    state = np.random.SeedSequence(int(seed)).generate_state(n, np.uint64)
    return tuple(int(s) for s in state)
