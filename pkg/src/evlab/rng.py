"""Seeded, platform-independent random number generation.

The generator is a lane-parallel xoshiro256** driven by 64-bit integer
arithmetic with wraparound semantics, so the stream depends only on the
seed, never on the platform, numpy version, or process state.  Lane 0
follows the reference scalar xoshiro256** stream for the same seed; the
remaining lanes are independent streams whose outputs are interleaved,
which lets bulk draws run at numpy speed while staying reproducible.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state and return (new_state, output word)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """Deterministic generator: identical seed, identical output stream.

    Scalar and bulk draws consume the same interleaved stream, so any
    fixed sequence of calls reproduces bit-identically for a given seed.
    """

    def __init__(self, seed: int, lanes: int = 64):
        self.seed = int(seed) & _MASK64
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self._lanes = lanes
        sm = self.seed
        words = []
        for _ in range(4 * lanes):
            sm, w = _splitmix64(sm)
            words.append(w)
        # (lanes, 4) -> transpose so row i holds word s_i of every lane;
        # lane 0 then matches the reference seeding order s0..s3.
        self._s = np.array(words, dtype=np.uint64).reshape(lanes, 4).T.copy()
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0

    def _generate(self, blocks: int) -> np.ndarray:
        """Run `blocks` xoshiro256** steps on all lanes, interleaved output."""
        s0, s1, s2, s3 = self._s
        out = np.empty((blocks, self._lanes), dtype=np.uint64)
        nine = np.uint64(9)
        five = np.uint64(5)
        seventeen = np.uint64(17)
        for i in range(blocks):
            out[i] = _rotl(s1 * five, 7) * nine
            t = s1 << seventeen
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = _rotl(s3, 45)
        self._s = np.stack([s0, s1, s2, s3])
        return out.ravel()

    def _take(self, n: int) -> np.ndarray:
        avail = self._buf.size - self._pos
        if avail < n:
            blocks = max(64, -(-(n - avail) // self._lanes))
            fresh = self._generate(blocks)
            self._buf = np.concatenate([self._buf[self._pos:], fresh])
            self._pos = 0
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def u64(self, n: int | None = None):
        """Raw 64-bit words: a Python int when n is None, else an array."""
        if n is None:
            return int(self._take(1)[0])
        return self._take(n).copy()

    def random(self, size=None):
        """Uniform float64 in [0, 1) with 53-bit resolution."""
        if size is None:
            return float(self._take(1)[0] >> np.uint64(11)) * 2.0 ** -53
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        u = (self._take(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u.reshape(size) if not np.isscalar(size) else u

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        """Standard Box-Muller pairs; u1 drawn in (0, 1] to keep log finite."""
        scalar = size is None
        n = 1 if scalar else (int(np.prod(size)) if not np.isscalar(size) else int(size))
        pairs = -(-n // 2)
        u = self._take(2 * pairs)
        u1 = ((u[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = (u[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = loc + scale * z[:n]
        if scalar:
            return float(z[0])
        return z.reshape(size) if not np.isscalar(size) else z

    def integers(self, bound: int, size=None):
        """Uniform integers in [0, bound). Bias is below 2**-53 per draw."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if size is None:
            return int(self.random() * bound)
        return np.minimum((self.random(size) * bound).astype(np.int64), bound - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def spawn(self) -> "Rng":
        """Derive an independent child generator from the stream."""
        return Rng(self.u64(), lanes=self._lanes)
