"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def numeric_grad(fn, params: dict, h: float = 1e-4) -> dict:
    """d fn() / d p for every parameter, by central differences on each entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn().item()
            flat[i] = keep - h
            down = fn().item()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def analytic_grad(fn, params: dict) -> dict:
    for p in params.values():
        p.zero_grad()
    root = fn()
    if not isinstance(root, Tensor):
        raise TypeError("fn must return a Tensor")
    root.backward()
    return {k: p.grad.copy() for k, p in params.items()}


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the flattened arrays."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(fn, params: dict, h: float = 1e-4) -> float:
    """Largest relative error over all parameters."""
    ana = analytic_grad(fn, params)
    num = numeric_grad(fn, params, h)
    return max(relative_error(ana[k], num[k]) for k in params)


def check_directional(fn, params: dict, n_dirs: int = 3, h: float = 1e-6, seed: int = 0) -> float:
    """Largest relative error of grad . v against a central difference along random unit v.

    Two evaluations per direction instead of two per entry, for losses whose
    forward pass is expensive (the Sinkhorn term).
    """
    ana = analytic_grad(fn, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = {k: rng.normal(size=p.value.shape) for k, p in params.items()}
        norm = np.sqrt(sum(float((d ** 2).sum()) for d in dirs.values()))
        keep = {k: p.value.copy() for k, p in params.items()}
        for k, p in params.items():
            p.value[...] = keep[k] + h * dirs[k] / norm
        up = fn().item()
        for k, p in params.items():
            p.value[...] = keep[k] - h * dirs[k] / norm
        down = fn().item()
        for k, p in params.items():
            p.value[...] = keep[k]
        numeric = (up - down) / (2 * h)
        exact = sum(float((ana[k] * dirs[k]).sum()) for k in params) / norm
        worst = max(worst, relative_error(np.array([exact]), np.array([numeric])))
    return worst
