"""Seeded random streams.

Raw bits come from PCG64 (numpy's implementation, whose output stream is
fixed for a given seed across platforms and numpy releases). The seed is
expanded with ``SeedSequence([seed, stream_id])`` where ``stream_id`` is
the 64-bit FNV-1a hash of a purpose name, so "init", "augment" and "patch"
streams never overlap. Floating-point variates are derived here from the raw
64-bit words rather than through numpy's distribution code:

* uniform: top 53 bits scaled by 2**-53, in [0, 1)
* normal: Box-Muller on two uniforms
* integers: floor of a scaled uniform
"""

from __future__ import annotations

import copy

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name & _MASK64
    return fnv1a64(name.encode("utf-8"))


class Rng:
    def __init__(self, seed: int, stream: str | int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = stream
        self._bitgen = np.random.PCG64(np.random.SeedSequence([self.seed, stream_id(stream)]))

    def derive(self, stream: str | int) -> "Rng":
        """Independent generator for another purpose, same seed."""
        return Rng(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bitgen.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u1 = self.uniform((n,))
        u2 = self.uniform((n,))
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, (1,))[0])

    @property
    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "pcg64": copy.deepcopy(self._bitgen.state)}

    @state.setter
    def state(self, value: dict) -> None:
        self.seed = int(value["seed"])
        self.stream = value["stream"]
        self._bitgen = np.random.PCG64(np.random.SeedSequence([self.seed, stream_id(self.stream)]))
        self._bitgen.state = copy.deepcopy(value["pcg64"])

    @classmethod
    def from_state(cls, value: dict) -> "Rng":
        rng = cls(int(value["seed"]), value["stream"])
        rng.state = value
        return rng
