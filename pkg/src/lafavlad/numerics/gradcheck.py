"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import DiffArray, Tape, no_grad


def numeric_gradient(fn: Callable[[], DiffArray], wrt: DiffArray, h: float = 1e-5) -> np.ndarray:
    """d fn() / d wrt by central differences; ``wrt`` is perturbed in place."""
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_gradients(fn: Callable[[], DiffArray], wrt: Sequence[DiffArray]) -> list:
    for a in wrt:
        a.grad = None
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    return [a.grad.copy() for a in wrt]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / (max(|a|, |n|) + floor), elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + floor)))


def check_gradients(fn: Callable[[], DiffArray], wrt: Sequence[DiffArray],
                    h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error over every entry of every array in ``wrt``."""
    grads = analytic_gradients(fn, wrt)
    worst = 0.0
    for a, g in zip(wrt, grads):
        worst = max(worst, relative_error(g, numeric_gradient(fn, a, h), floor))
    return worst
