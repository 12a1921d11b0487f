"""Deterministic random streams.

All randomness in the simulator flows through `Rng`, a thin wrapper around
numpy's PCG64 generator. Streams are derived from a base seed plus string
labels via a cryptographic hash, so every component (init, batching,
dropout, noise, sampling) gets an independent stream that is reproducible
across platforms and independent of call ordering elsewhere.
"""

from __future__ import annotations

import hashlib

import numpy as np

MAX_SEED = 2**64 - 1


def stable_hash(*parts) -> int:
    """Map arbitrary labels to a 64-bit integer, identically on every platform.

    Python's builtin hash() is salted per process; this one is not.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Seeded random stream. Identical seed + call sequence => identical output."""

    def __init__(self, seed: int):
        if not 0 <= seed <= MAX_SEED:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def derive(self, *labels) -> "Rng":
        """Child stream keyed by (seed, labels); independent of this stream's state."""
        return Rng(stable_hash(self.seed, *labels))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def laplace(self, scale: float, shape) -> np.ndarray:
        return self._gen.laplace(loc=0.0, scale=scale, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def bernoulli(self, p, size=None) -> np.ndarray:
        return self._gen.random(size=size) < p
