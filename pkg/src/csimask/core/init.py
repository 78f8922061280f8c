"""Seeded parameter initialization.

All stochastic draws in the package go through explicitly passed
``numpy.random.Generator`` handles backed by the counter-based Philox bit
generator, so any op sequence is bitwise reproducible from its seed.
"""

from __future__ import annotations

import numpy as np


def make_rng(*keys: int) -> np.random.Generator:
    """Build a Philox generator from an integer key path.

    Distinct key tuples give statistically independent streams; the same
    tuple always gives the same stream.
    """
    entropy = [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def fan_in_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for convs and affines."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
