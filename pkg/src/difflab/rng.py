"""Seed derivation.

All randomness flows through numpy Generators. A master seed plus a tuple
of integer indices deterministically identifies a stream, so Monte Carlo
loops can shard across workers (or batches) without changing results.
"""

from __future__ import annotations

import numpy as np


def derive_rng(master_seed: int, *indices: int) -> np.random.Generator:
    """Child generator for (master_seed, indices).

    The same (seed, indices) pair always yields an identical stream,
    independent of how many siblings were spawned before it.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.default_rng(ss)


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(int(seed_or_rng))
