"""Counter-free, platform-stable random streams.

xoshiro256++ seeded through splitmix64.  A :class:`Stream` runs ``LANES``
independent xoshiro256++ generators side by side in numpy ``uint64`` arrays,
so bulk draws (forcing noise, weight init) stay vectorised while every value
remains a pure function of the seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
LANES = 64

_U64 = np.uint64


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def mix64(x: int) -> int:
    return splitmix64(x & MASK64)[1]


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def derive_seed(base: int, purpose: str, member: int = 0, step: int = 0) -> int:
    """Seed of the stream for one (purpose, member, step) triple.

    ``seed = splitmix64(base ^ purpose_tag ^ member)`` where the purpose tag
    hashes the purpose name and the step index together.
    """
    tag = fnv1a64(f"{purpose}#{step}")
    return mix64((base & MASK64) ^ tag ^ (member & MASK64))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class ScalarXoshiro:
    """Plain single-lane xoshiro256++ (reference implementation for tests)."""

    def __init__(self, state: list[int]):
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256++ needs four words, not all zero")
        self.s = [w & MASK64 for w in state]

    @classmethod
    def from_seed(cls, seed: int) -> "ScalarXoshiro":
        sm = seed & MASK64
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        return cls(words)

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[0] + s[3]) & MASK64, 23) + s[0]) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result


def _splitmix_words(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of splitmix64 started at ``seed`` (vectorised)."""
    with np.errstate(over="ignore"):
        state = _U64(seed) + _U64(GOLDEN) * np.arange(1, n + 1, dtype=_U64)
        z = (state ^ (state >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _vrotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Stream:
    """Vectorised xoshiro256++ stream.

    Lane ``j`` is seeded with words ``4j..4j+3`` of a splitmix64 sequence
    started at ``seed``.  Draws are emitted lane-interleaved, one block of
    ``LANES`` values per generator step; unused values of a block are
    buffered so consecutive draws never skip.
    """

    def __init__(self, seed: int, lanes: int = LANES):
        self.seed = seed & MASK64
        self._s = _splitmix_words(self.seed, 4 * lanes).reshape(lanes, 4).T.copy()
        self._buf = np.empty(0, dtype=_U64)

    @classmethod
    def for_purpose(
        cls, base: int, purpose: str, member: int = 0, step: int = 0, lanes: int = LANES
    ) -> "Stream":
        return cls(derive_seed(base, purpose, member, step), lanes=lanes)

    def _block(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _vrotl(s0 + s3, 23) + s0
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _vrotl(s3, 45)
        return result

    @property
    def lanes(self) -> int:
        return self._s.shape[1]

    def u64(self, n: int) -> np.ndarray:
        lanes = self._s.shape[1]
        need = n - self._buf.size
        parts = [self._buf]
        if need > 0:
            nblocks = -(-need // lanes)
            parts.extend(self._block() for _ in range(nblocks))
        flat = np.concatenate(parts) if len(parts) > 1 else parts[0]
        self._buf = flat[n:].copy()
        return flat[:n]

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.u64(n) >> _U64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals (Box-Muller, pairs from consecutive uniforms)."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """Integers in [0, high) (multiply-shift on the top 32 bits)."""
        if high <= 0:
            raise ValueError("high must be positive")
        top = (self.u64(n) >> _U64(32)).astype(np.float64)
        return np.floor(top * high / 2.0**32).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
