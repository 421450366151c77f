"""Categorical sampling with Vose's alias method."""

from typing import Sequence

import numpy as np


class AliasSampler:
    """O(N) setup, O(1) draws from a fixed categorical distribution."""

    def __init__(self, probabilities: Sequence[float]):
        probs = np.asarray(probabilities, dtype=float)
        if probs.ndim != 1 or len(probs) == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(probs < 0) or not np.isfinite(probs).all():
            raise ValueError("probabilities must be finite and non-negative")
        total = probs.sum()
        if total <= 0:
            raise ValueError("probabilities must not all be zero")

        n = len(probs)
        scaled = probs * (n / total)
        self.n = n
        self.prob = np.ones(n)
        self.alias = np.arange(n)

        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            l = large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] = (scaled[l] + scaled[s]) - 1.0
            if scaled[l] < 1.0:
                small.append(l)
            else:
                large.append(l)
        # leftovers are 1 up to rounding
        for i in small + large:
            self.prob[i] = 1.0
            self.alias[i] = i

    def draw(self, rng: np.random.Generator) -> int:
        """One sample index."""
        u = rng.random() * self.n
        column = min(int(u), self.n - 1)
        if u - column < self.prob[column]:
            return column
        return int(self.alias[column])

    def draw_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Vector of sample indices."""
        u = rng.random(size) * self.n
        columns = np.minimum(u.astype(np.intp), self.n - 1)
        accept = (u - columns) < self.prob[columns]
        return np.where(accept, columns, self.alias[columns])
