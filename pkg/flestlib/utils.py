from __future__ import annotations

import numpy as np

__all__ = ("make_rng", "sigmoid", "softplus")


def make_rng(*seed_parts: int) -> np.random.Generator:
    """Generator seeded from an explicit tuple, so (seed, client, epoch) streams never collide."""
    return np.random.default_rng([int(part) for part in seed_parts])


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    # Branch form, exp() only ever sees non-positive arguments.
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x: np.ndarray | float) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))
