"""Portable pseudo-random numbers.

Scenario generation and obstacle motion must give the same numbers on every
platform and numpy version, so they draw from this generator instead of
``numpy.random``.

Algorithm: xoshiro256** (Blackman & Vigna), state seeded by SplitMix64 from a
single unsigned 64-bit seed. Constants::

    splitmix64:  x += 0x9E3779B97F4A7C15
                 z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                 z ^ (z >> 31)
    xoshiro256**: result = rotl(s1 * 5, 7) * 9
                  t = s1 << 17
                  s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t
                  s3 = rotl(s3, 45)

``uniform()`` uses the top 53 bits: ``(next() >> 11) * 2**-53``.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    __slots__ = ("_s",)

    def __init__(self, seed: int):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        return lo + (hi - lo) * u

    def uniform_disk(self, radius: float) -> tuple[float, float]:
        # rejection from the bounding square keeps the draw order simple
        while True:
            x = self.uniform(-radius, radius)
            y = self.uniform(-radius, radius)
            if x * x + y * y <= radius * radius:
                return x, y
