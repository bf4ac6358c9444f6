"""Deterministic, splittable random state.

A ``RngState`` is an immutable (seed, path) pair mapped onto numpy's
``SeedSequence`` spawning mechanism with the PCG64 bit generator.  Children
derived through :meth:`child` or :meth:`split` are statistically independent
of the parent and of each other, and the same (seed, path) always yields the
same stream regardless of platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "pcg64"


@dataclass(frozen=True)
class RngState:
    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def child(self, tag: int) -> "RngState":
        """Derive the child stream at ``tag`` without consuming this state."""
        return RngState(self.seed, self.path + (int(tag),))

    def split(self, n: int) -> list["RngState"]:
        """Derive ``n`` independent child streams."""
        return [self.child(i) for i in range(n)]

    def generator(self) -> np.random.Generator:
        """Materialize a numpy Generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))
