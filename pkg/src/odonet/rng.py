"""Deterministic randomness: one root seed, split per purpose.

Every random draw in a run flows from ``generator(root, purpose, *keys)``.
The derivation is stateless (a pure function of root seed, purpose and
integer keys such as epoch or sample id), so resumed runs reproduce the
exact stream of an uninterrupted run without serializing generator state.
"""

import numpy as np

PURPOSES = ("init", "shuffle", "dropout", "augment", "data")


def generator(root_seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return a fresh Generator for (root seed, purpose, keys)."""
    if purpose not in PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}; expected one of {PURPOSES}")
    idx = PURPOSES.index(purpose)
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(idx, *keys))
    return np.random.default_rng(ss)
