"""Deterministic, counter-based random streams.

Every stochastic component (training, attack Monte-Carlo draws, sampling,
dataset synthesis) owns an independent stream derived from one global seed,
so experiments compose deterministically and rerunning any subset of the
pipeline reproduces its draws bit for bit.

Streams are Philox-4x64 counter-based generators.  A stream is addressed by
a 64-bit key obtained by folding the seed and a derivation path (strings and
integers) through SplitMix64; the same (seed, path) always names the same
stream on every platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> int:
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fold_token(state: int, token) -> int:
    """Mix one path token (int or str) into a 64-bit stream key."""
    if isinstance(token, (int, np.integer)):
        return _splitmix64(state ^ (int(token) & _MASK64))
    if isinstance(token, str):
        h = 0xCBF29CE484222325  # FNV-1a over UTF-8
        for byte in token.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & _MASK64
        return _splitmix64(state ^ h)
    raise TypeError(f"rng path tokens must be int or str, got {type(token)!r}")


class Rng:
    """One deterministic stream, addressable by (seed, derivation path)."""

    algorithm = "philox4x64"

    def __init__(self, seed: int, _key: int | None = None, _path: tuple = ()):
        self.seed = int(seed) & _MASK64
        self.path = _path
        self._key = self.seed if _key is None else _key
        self._gen: np.random.Generator | None = None

    def derive(self, *tokens) -> "Rng":
        """Return an independent child stream named by `tokens`."""
        key = self._key
        for tok in tokens:
            key = _fold_token(key, tok)
        return Rng(self.seed, _key=key, _path=self.path + tuple(tokens))

    @property
    def stream_key(self) -> int:
        """The 64-bit key naming this stream; differs for every derive path.

        Use this (not `.seed`, which is the root) when a derived stream's
        identity must seed an independent component.
        """
        return self._key

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=self._key))
        return self._gen

    # Draw helpers.  Each call advances this stream's counter.
    def normal(self, shape=()) -> np.ndarray:
        return self.generator.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high] inclusive."""
        return self.generator.integers(low, high, size=shape, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        path = "/".join(str(t) for t in self.path)
        return f"Rng(seed={self.seed}, path={path!r})"
