"""Counter-based random streams.

A stream is identified by (seed, stream_id) and owns an independent Philox
generator.  Child streams are derived by hashing a string label, so every
consumer of randomness — init of layer 7, the step-1234 minibatch, episode 55
of an evaluation sweep — gets a stream that is a pure function of the run seed
and its label.  Draw order within a stream matters; stream identity does not
depend on creation order, which is what makes resumed runs bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_id(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


class Rng:
    """One Philox stream plus the ability to fork named substreams."""

    algorithm = "philox"

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def split(self, label: str) -> "Rng":
        """Fork a substream; same (seed, label) always yields the same stream."""
        return Rng(self.seed, self.stream_id ^ _label_to_id(label))

    # -- draws ---------------------------------------------------------------

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
