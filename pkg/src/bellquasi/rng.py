"""Counter-based Gaussian noise.

Every increment is a pure function of (seed, stream, path index, step,
coordinate), so results do not depend on how paths are split across
workers or on how many paths are still alive at a given step.
"""
from __future__ import annotations

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# stream ids
BASE = 1
AUX = 2
UNIFORM = 3


def _mix(z):
    # splitmix64 finalizer; uint64 arithmetic wraps silently on arrays
    z = z + _GOLD
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _keyed(seed, stream, paths, step):
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix(np.uint64(stream)))
        h = _mix(h ^ np.asarray(paths, dtype=np.uint64))
        h = _mix(h ^ np.uint64(step))
    return h


def _unit(h):
    # (0, 1], 53-bit resolution
    return ((h >> _S11).astype(np.float64) + 1.0) * _INV53


def uniforms(seed: int, stream: int, paths, step: int) -> np.ndarray:
    """One U(0,1] draw per path."""
    with np.errstate(over="ignore"):
        h = _mix(_keyed(seed, stream, paths, step))
    return _unit(h)


def normals(seed: int, stream: int, paths, step: int, dim: int) -> np.ndarray:
    """Standard normals of shape (len(paths), dim) via Box-Muller."""
    paths = np.atleast_1d(np.asarray(paths, dtype=np.int64))
    base = _keyed(seed, stream, paths, step)[:, None]
    coords = np.arange(dim, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        h1 = _mix(base ^ _mix(coords * np.uint64(2)))
        h2 = _mix(base ^ _mix(coords * np.uint64(2) + np.uint64(1)))
    u1 = _unit(h1)
    u2 = _unit(h2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class NoiseStream:
    """Noise for a single path: increments and the independent aux stream."""

    def __init__(self, seed: int, path_index: int = 0):
        self.seed = int(seed)
        self.path_index = int(path_index)

    def increment(self, step: int, dim: int, dt: float) -> np.ndarray:
        return np.sqrt(dt) * normals(self.seed, BASE, [self.path_index], step, dim)[0]

    def aux_increment(self, step: int, dim: int, dt: float) -> np.ndarray:
        return np.sqrt(dt) * normals(self.seed, AUX, [self.path_index], step, dim)[0]

    def increments(self, dim: int, dt: float):
        k = 0
        while True:
            yield self.increment(k, dim, dt)
            k += 1

    def aux_increments(self, dim: int, dt: float):
        k = 0
        while True:
            yield self.aux_increment(k, dim, dt)
            k += 1


def derive_seed(master: int, label: str) -> int:
    """Stable child seed for a named check."""
    h = np.uint64(master & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for ch in label.encode():
            h = _mix(h ^ np.uint64(ch))
    return int(h) & 0x7FFFFFFFFFFFFFFF
