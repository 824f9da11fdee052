"""Seeded random number generation.

All stochastic code in this package draws from numpy's Philox bit
generator, a counter-based splittable RNG. Determinism contract: the same
64-bit seed always yields the same stream, and child streams derived with
``spawn`` are independent and reproducible.
"""

from __future__ import annotations

import numpy as np


def generator(seed: int) -> np.random.Generator:
    """Return a fresh Philox generator for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn(seed: int, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from one seed.

    Splitting rule: children are the first ``n`` spawns of
    ``SeedSequence(seed)``, in order.
    """
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]
