"""Counter-based random streams keyed by (base seed, cell, replicate, purpose)."""

from __future__ import annotations

from typing import Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]

STREAM_PURPOSES = {
    "data": 0,
    "bootstrap": 1,
    "monte-carlo": 2,
    "calibration": 3,
}


def make_generator(seed: SeedLike) -> np.random.Generator:
    """Philox generator for an int seed or SeedSequence; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    if isinstance(seed, (bool, float)) or seed is None:
        raise TypeError(f"seed must be an int, SeedSequence or Generator, got {seed!r}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def replicate_sequence(base_seed: int, cell: int, replicate: int, purpose: str = "data") -> np.random.SeedSequence:
    try:
        purpose_key = STREAM_PURPOSES[purpose]
    except KeyError as exc:
        raise ValueError(f"unknown stream purpose {purpose!r}") from exc
    return np.random.SeedSequence(
        entropy=int(base_seed),
        spawn_key=(int(cell), int(replicate), purpose_key),
    )


def replicate_generator(base_seed: int, cell: int, replicate: int, purpose: str = "data") -> np.random.Generator:
    return make_generator(replicate_sequence(base_seed, cell, replicate, purpose))
