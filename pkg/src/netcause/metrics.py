"""Effect and outcome error metrics."""

from __future__ import annotations

import numpy as np


class LengthMismatch(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} estimates for {b.size} truths")
    if a.size == 0:
        raise LengthMismatch("empty input")
    return a, b


def pehe(estimates, truths) -> float:
    """Root mean squared error of individual effect estimates."""
    a, b = _pair(estimates, truths)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse(predictions, targets) -> float:
    a, b = _pair(predictions, targets)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd
