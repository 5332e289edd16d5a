"""Hierarchical seeded random streams.

Every stochastic choice in the package draws from an :class:`RngStream`.  A stream
is identified by ``(seed, path)``; ``child(*keys)`` derives an independent stream,
so any component can be replayed in isolation from the root seed alone.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "pcg64"


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class RngStream:
    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self.algorithm = ALGORITHM
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.draws = 0

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + keys)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path}, draws={self.draws})"

    def _count(self, size) -> None:
        self.draws += int(np.prod(size)) if size is not None else 1

    def random(self, size=None):
        self._count(size)
        return self._gen.random(size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        self._count(size)
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        self._count(size)
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self._count(size)
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None, endpoint: bool = False):
        self._count(size)
        return self._gen.integers(low, high, size, endpoint=endpoint)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        self._count(size)
        return self._gen.choice(a, size=size, replace=replace)

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "path": [p if isinstance(p, (int, np.integer)) else str(p) for p in self.path],
            "algorithm": self.algorithm,
            "draws": self.draws,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        if state.get("algorithm", ALGORITHM) != ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {state['algorithm']!r}")
        stream = cls(state["seed"], tuple(state["path"]))
        stream._gen.bit_generator.state = state["bit_generator"]
        stream.draws = state["draws"]
        return stream


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))
