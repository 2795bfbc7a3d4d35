"""Central finite differences for validating analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def fd_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central-difference gradient of f with respect to arr.

    f must read arr by reference (it is perturbed in place and restored), and
    return a scalar. Cost is two evaluations per element.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = arr[ix]
        arr[ix] = orig + h
        f_plus = f()
        arr[ix] = orig - h
        f_minus = f()
        arr[ix] = orig
        grad[ix] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both norms sit below floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
