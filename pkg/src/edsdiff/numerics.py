"""Random streams and small numerical helpers shared by the whole package.

Vectors and matrices are plain float64 numpy arrays (C order, i.e. row-major).

Streams are counter-based: each ``RngStream`` is a Philox-4x64 generator whose
128-bit key is the pair ``(master_seed, stream_index)`` and whose counter
starts at zero.  Deriving a stream is therefore a pure function of those two
integers, and streams that differ in either key word are independent in the
Philox sense (distinct keys give unrelated bijections of the counter space).
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


class RngStream:
    """A reproducible standard-normal source keyed by ``(master_seed, stream_index)``."""

    def __init__(self, master_seed: int, stream_index: int = 0):
        if not (0 <= master_seed <= _U64 and 0 <= stream_index <= _U64):
            raise ValueError("master_seed and stream_index must be 64-bit unsigned")
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        key = np.array([self.master_seed, self.stream_index], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        """Stream on the same master seed with a different index."""
        return RngStream(self.master_seed, index)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"


def derive_seed(*parts: int) -> int:
    """Fold several integers into one 64-bit seed (SplitMix64 finalizer chain)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (int(p) & _U64)) & _U64
        h = (h + 0x9E3779B97F4A7C15) & _U64
        z = h
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        h = z ^ (z >> 31)
    return h


def gaussian_sample(rng: RngStream, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)


def logsumexp(v, axis=None):
    """log(sum(exp(v))) via max subtraction; works along ``axis`` for arrays."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)
