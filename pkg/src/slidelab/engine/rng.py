"""Deterministic random numbers.

Scalar draws come from a hand-rolled xoshiro256** stream (4 x 64-bit state,
Python-int arithmetic masked to 64 bits so behaviour is identical on every
platform). Bulk draws consume exactly one stream step to obtain a key and then
expand it with a vectorised splitmix64 counter walk, which keeps slide-sized
noise fields cheap without perturbing the scalar stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_PHI64 = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 finalisation step on a 64-bit value."""
    z = (x + _PHI64) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def hash_purpose(*parts: object) -> int:
    """FNV-1a over the '/'-joined string form of parts, as a 64-bit int."""
    text = "/".join(str(p) for p in parts)
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def _splitmix_array(states: np.ndarray) -> np.ndarray:
    # Vectorised finaliser; uint64 array ops wrap silently.
    z = (states + np.uint64(_PHI64))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """xoshiro256** stream with per-purpose derivation.

    Identical seeds yield identical streams; derive() mixes a purpose hash
    into the seed so independent consumers never share a stream.
    """

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        # Expand the 64-bit seed into four state words via splitmix64.
        x = self.seed
        s = []
        for _ in range(4):
            x = (x + _PHI64) & _MASK64
            s.append(splitmix64(x))
        if not any(s):  # all-zero state is the one forbidden xoshiro state
            s[0] = _PHI64
        self._s = s

    def derive(self, *purpose: object) -> "Rng":
        """Child stream keyed by seed XOR hash(purpose)."""
        return Rng(self.seed ^ hash_purpose(*purpose))

    def next_u64(self) -> int:
        s = self._s
        result = (self._rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = self._rotl(s[3], 45)
        return result

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & _MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0 ** -53
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Uniform-ish int in [0, n); modulo bias is negligible for small n."""
        if n <= 0:
            raise ValueError(f"randint needs n >= 1, got {n}")
        return self.next_u64() % n

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        # Box-Muller; consumes two stream steps, no cached spare.
        import math

        u1 = max(self.uniform(), 2.0 ** -53)
        u2 = self.uniform()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mu + sigma * z

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using the scalar stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)

    # -- bulk draws: one stream step yields a key, the rest is counter-based --

    def u64_array(self, n: int) -> np.ndarray:
        key = np.uint64(self.next_u64())
        idx = np.arange(n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = key + idx * np.uint64(_PHI64)
            return _splitmix_array(states)

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal_array(self, n: int, sigma: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform_array(2 * m)
        u1 = np.maximum(u[:m], 2.0 ** -53)
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z * sigma

    def truncated_normal_array(self, n: int, sigma: float) -> np.ndarray:
        """Normal draws clipped to +-2 sigma (init convention)."""
        return np.clip(self.normal_array(n, sigma), -2.0 * sigma, 2.0 * sigma)
