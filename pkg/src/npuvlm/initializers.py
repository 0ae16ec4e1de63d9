"""Seeded weight initializers shared by every model."""

from __future__ import annotations

import numpy as np


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """``U(-a, a)`` with variance ``gain**2 / fan_in``.

    Uniform draws have a crest factor of sqrt(3), so per-tensor weight
    quantization of a fresh model is not dominated by rare Gaussian tails.
    """
    a = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)
