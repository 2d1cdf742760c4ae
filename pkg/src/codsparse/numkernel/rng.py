"""Counter-based random streams.

A stream is numpy's Philox-4x64 generator keyed by a hash of an integer
seed and an optional tuple of labels.  Philox output depends only on
(key, counter), so equal keys give equal draws on every platform, and
labelled children give independent substreams without any shared state.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import DomainError, Tensor

ALGORITHM = "philox4x64-10"


def _derive_key(seed: int, labels: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Deterministic random stream identified by ``(seed, labels)``."""

    def __init__(self, seed: int, *labels):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.labels = tuple(labels)
        self._bitgen = np.random.Philox(key=_derive_key(self.seed, self.labels))
        self.generator = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        """Low word of the Philox block counter (advances as draws are made)."""
        return int(self._bitgen.state["state"]["counter"][0])

    def child(self, *labels) -> "Rng":
        """Independent substream; does not advance this stream."""
        return Rng(self.seed, *self.labels, *labels)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise DomainError(f"standard deviation must be >= 0, got {std}")
        z = self.generator.standard_normal(shape)
        return mean + std * z

    def bernoulli(self, shape, p: float) -> np.ndarray:
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"probability must lie in [0, 1], got {p}")
        return (self.generator.random(shape) < p).astype(np.float64)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, labels={self.labels}, counter={self.counter})"


def gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """I.i.d. normal tensor drawn from ``rng``."""
    return Tensor(rng.normal(shape, mean, std), copy=False)
