"""Counter-style random streams.

A stream is identified by a master seed plus a path of keys (module names,
iteration indices, member/sample indices).  Streams with distinct paths are
statistically independent, and ``stream(seed, path)`` is a pure function, so
any subset of the work can be replayed or parallelized without changing a
single draw.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


def _encode_key(key) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be nonnegative ints, got {key}")
        return (int(key),)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return tuple(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


@dataclass(frozen=True)
class RngStream:
    """Deterministic, splittable source of randomness."""

    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def child(self, *keys) -> "RngStream":
        extra: tuple[int, ...] = ()
        for key in keys:
            extra = extra + _encode_key(key)
        return RngStream(self.seed, self.path + extra)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed,) + self.path)))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)
