"""Seeded random state with purpose-keyed substreams.

All randomness in the toolkit flows through :class:`RngState`, a thin wrapper
around numpy's PCG64 bit generator. A substream is derived from the root seed
plus a tuple of integer keys, so every consumer (model init, dataset split,
per-epoch shuffling, ...) draws from its own stream and the draw sequence for
a given (seed, key) pair is identical across runs on the same build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Substream purpose keys. Derived streams are independent of each other and of
# the order in which they are created.
STREAM_MODEL_INIT = 1
STREAM_SPLIT = 2
STREAM_SHUFFLE = 3
STREAM_AUGMENT = 4
STREAM_SYNTH = 5


@dataclass(frozen=True)
class RngState:
    """Root random state: a 64-bit seed driving PCG64 substreams."""

    seed: int

    algorithm = "pcg64"

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def generator(self, *key: int) -> np.random.Generator:
        """Return a fresh generator for the substream identified by ``key``."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))
