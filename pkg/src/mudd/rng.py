"""Counter-based random streams.

Every draw is addressed by ``(seed, name)`` or ``(seed, counter)`` through
numpy's Philox generator, so what a parameter receives does not depend on
the order in which other parameters were drawn.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _stable_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


@dataclass
class RngState:
    seed: int
    counter: int = 0

    def stream(self, name: str) -> np.random.Generator:
        """Generator keyed by the seed and a name; independent of ``counter``."""
        key = ((self.seed & _MASK64) << 64) | _stable_hash(name)
        return np.random.Generator(np.random.Philox(key=key))

    def next(self) -> np.random.Generator:
        """Generator for the current counter value, then advance the counter."""
        key = ((self.seed & _MASK64) << 64) | (self.counter & _MASK64)
        gen = np.random.Generator(np.random.Philox(key=key, counter=1))
        self.counter += 1
        return gen
