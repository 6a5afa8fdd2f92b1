"""Seeded random streams and Kaiming-uniform initialisation.

``SeededRng`` wraps numpy's Philox counter-based bit generator, whose output
for a given key is fixed across platforms. Named substreams (``child``) let
independent consumers (init, batching, expansion probes) draw without
perturbing each other.
"""

from __future__ import annotations

import math
import zlib

import numpy as np


class SeededRng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> SeededRng:
        """Independent stream identified by ``name`` (stable across runs)."""
        return SeededRng(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def uniform(self, low: float, high: float, shape: tuple[int, int]) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, high: int, size: int) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def kaiming_bound(fan_in: int) -> float:
    # gain sqrt(2): bound = gain * sqrt(3 / fan_in)
    return math.sqrt(6.0 / fan_in)


def kaiming_uniform(rows: int, cols: int, rng: SeededRng) -> np.ndarray:
    """``rows x cols`` matrix drawn from U(-b, b), b = sqrt(6 / rows).

    ``rows`` is the fan-in: the matrix is applied as ``x @ M``.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"kaiming_uniform needs positive dimensions, got {rows}x{cols}")
    b = kaiming_bound(rows)
    return rng.uniform(-b, b, (rows, cols))
