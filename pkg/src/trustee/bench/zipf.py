"""Skewed and uniform index samplers for the workload generators.

Ranks are 1-based: rank ``r`` is drawn with probability proportional to
``r ** -alpha``. Up to ``TABLE_LIMIT`` ranks the sampler inverts an exact
cumulative table; above that it uses rejection-inversion, which needs no
table and is exact as well, just slower per draw.
"""

from __future__ import annotations

import math

import numpy as np

TABLE_LIMIT = 10_000_000


def zipf_probabilities(n: int, alpha: float) -> np.ndarray:
    """Exact rank probabilities, index 0 holding rank 1."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


class ZipfSampler:
    """Deterministic (per seed) stream of Zipf-distributed ranks in ``1..n``."""

    def __init__(self, n: int, alpha: float = 1.0, seed: int | np.random.SeedSequence | list = 0):
        if n < 1:
            raise ValueError("n must be >= 1")
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.n = n
        self.alpha = float(alpha)
        self.rng = np.random.default_rng(seed)
        self._cdf: np.ndarray | None = None
        if n <= TABLE_LIMIT:
            cdf = np.cumsum(np.arange(1, n + 1, dtype=np.float64) ** -self.alpha)
            cdf /= cdf[-1]
            cdf[-1] = 1.0
            self._cdf = cdf
        else:
            self._setup_rejection()

    def draw(self, k: int) -> np.ndarray:
        """``k`` ranks as an int64 array."""
        if self.n == 1:
            return np.ones(k, dtype=np.int64)
        if self._cdf is not None:
            u = self.rng.random(k)
            return np.searchsorted(self._cdf, u, side="right").astype(np.int64) + 1
        return self._draw_rejection(k)

    def __iter__(self):
        while True:
            yield from self.draw(4096).tolist()

    # rejection-inversion (Hormann & Derflinger) for very large n
    def _h(self, x):
        a = self.alpha
        if a == 1.0:
            return np.log(x)
        return (np.power(x, 1.0 - a) - 1.0) / (1.0 - a)

    def _h_inv(self, y):
        a = self.alpha
        if a == 1.0:
            return np.exp(y)
        return np.power(1.0 + (1.0 - a) * y, 1.0 / (1.0 - a))

    def _setup_rejection(self) -> None:
        self._h_x1 = float(self._h(1.5)) - 1.0
        self._h_n = float(self._h(self.n + 0.5))
        self._s = 2.0 - float(self._h_inv(float(self._h(2.5)) - 2.0 ** -self.alpha))

    def _draw_rejection(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            m = max(2 * (k - filled), 64)
            u = self._h_n + self.rng.random(m) * (self._h_x1 - self._h_n)
            x = self._h_inv(u)
            r = np.clip(np.rint(x), 1, self.n)
            ok = (r - x <= self._s) | (u >= self._h(r + 0.5) - np.power(r, -self.alpha))
            got = r[ok].astype(np.int64)[: k - filled]
            out[filled : filled + len(got)] = got
            filled += len(got)
        return out


def uniform_indices(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=k, dtype=np.int64)


def object_sequence(
    n: int, k: int, dist: str, alpha: float, seed: int, stream: int, shuffle_ranks: bool = False
) -> np.ndarray:
    """0-based object indices for one thread; identical for every sync mode.

    ``stream`` separates per-thread sequences derived from one seed.
    """
    ss = np.random.SeedSequence([seed & (2**64 - 1), stream])
    if dist == "uniform":
        return uniform_indices(n, k, np.random.default_rng(ss))
    if dist == "zipf":
        idx = ZipfSampler(n, alpha, ss).draw(k) - 1
        if shuffle_ranks:
            perm = np.random.default_rng(seed).permutation(n)
            idx = perm[idx]
        return idx
    raise ValueError(f"unknown distribution {dist!r}")


def expected_top_fraction(n: int, alpha: float) -> float:
    """Probability mass of rank 1 (the hottest key)."""
    if n <= TABLE_LIMIT:
        return float(1.0 / np.sum(np.arange(1, n + 1, dtype=np.float64) ** -alpha))
    if alpha == 1.0:
        # harmonic number via Euler-Maclaurin
        h = math.log(n) + 0.5772156649015329 + 1 / (2 * n) - 1 / (12 * n * n)
        return 1.0 / h
    raise ValueError("closed form only for alpha == 1 beyond the table limit")
