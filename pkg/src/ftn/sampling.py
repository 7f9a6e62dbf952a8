"""Seeded sampling helpers.

Gaussian draws go through an explicit Box-Muller transform on top of the
generator's uniform stream so that runs are reproducible bit-for-bit from a
seed without depending on the generator's own normal algorithm.
"""

from __future__ import annotations

import numpy as np

__all__ = ["standard_normal", "categorical_rows"]


def standard_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal samples of the given shape via Box-Muller."""
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    pairs = (count + 1) // 2
    # u1 in (0, 1] so the log is finite.
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:count].reshape(shape)


def categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one category index per row of a row-stochastic matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be a matrix of row distributions")
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)
