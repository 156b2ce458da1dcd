"""Counter-based deterministic random numbers.

Every draw is a pure function of (seed, counter), so streams are
reproducible, trivially serializable (two u64 words), and splittable:
derived streams use a remixed seed and a fresh counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    # splitmix64 finalizer
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def hash_u64(seed: int, counter: int) -> int:
    """64-bit hash of a (seed, counter) pair."""
    return _mix64((seed + (counter + 1) * _GAMMA) & _MASK64)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RngState:
    """Immutable stream position; each draw returns an advanced copy."""

    seed: int
    counter: int = 0

    def uniform(self) -> tuple[float, "RngState"]:
        """One double in [0, 1)."""
        u = hash_u64(self.seed, self.counter)
        return u / 2.0**64, RngState(self.seed, self.counter + 1)

    def uniforms(self, n: int) -> tuple[np.ndarray, "RngState"]:
        """n doubles in [0, 1), vectorized."""
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        z = (np.uint64(self.seed) + (idx + np.uint64(1)) * np.uint64(_GAMMA))
        vals = _mix64_vec(z).astype(np.float64) / 2.0**64
        return vals, RngState(self.seed, self.counter + n)

    def split(self, lane: int) -> "RngState":
        """Independent derived stream for a parallel lane."""
        return RngState(hash_u64(self.seed, (lane << 32) ^ 0x5EEDFACE), 0)


def uniform_array(seed: int, n: int, start: int = 0) -> np.ndarray:
    """n uniforms in [0,1) from the counter range [start, start+n)."""
    vals, _ = RngState(seed, start).uniforms(n)
    return vals


def normal_array(seed: int, n: int, start: int = 0) -> np.ndarray:
    """n standard-normal draws via Box-Muller on the counter stream."""
    m = (n + 1) // 2
    u, _ = RngState(seed, start).uniforms(2 * m)
    u1 = np.clip(u[:m], 1e-300, 1.0)
    u2 = u[m:]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return out[:n]
