"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``param``, perturbed in place and restored."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = param[idx]
        param[idx] = old + h
        fp = f()
        param[idx] = old - h
        fm = f()
        param[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor * max|a|)``.

    The floor keeps entries that are negligible next to the largest gradient
    component from dominating through round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))
