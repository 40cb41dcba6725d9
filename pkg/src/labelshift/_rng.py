"""Deterministic derivation of independent RNG streams."""

import numpy as np

_MASK = (1 << 64) - 1


def stream(*key: int) -> np.random.Generator:
    """Generator keyed by a path of integers.

    Streams with different key paths are statistically independent, and the
    same path always yields the same stream regardless of call order.
    """
    return np.random.default_rng(np.random.SeedSequence([k & _MASK for k in key]))


def child_seed(*key: int) -> int:
    """Collapse a key path into a single 64-bit seed."""
    ss = np.random.SeedSequence([k & _MASK for k in key])
    return int(ss.generate_state(1, np.uint64)[0])
