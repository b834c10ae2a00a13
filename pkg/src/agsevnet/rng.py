"""Deterministic random number generation.

Every stochastic component of the kit (weight init, dropout, phantom
generation, shuffling) draws from an `Rng`. The generator algorithm is
pinned to numpy's PCG64 so a fixed seed yields a bitwise-identical
stream across runs and platforms. Independent sub-streams are derived
by hashing a label path into a child seed, so per-step randomness
(e.g. the dropout mask at training step 17) is a pure function of
(root seed, label path) and survives checkpoint/resume.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Seeded PCG64 stream with deterministic named sub-streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *tokens) -> "Rng":
        """Child stream keyed by `tokens`; independent of draws made so far.

        The child seed is the first 8 bytes of SHA-256 over
        "<seed>/<token>/<token>/...", so deriving the same path twice
        gives identical streams regardless of call order.
        """
        path = "/".join([str(self.seed)] + [str(t) for t in tokens])
        digest = hashlib.sha256(path.encode("utf-8")).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
