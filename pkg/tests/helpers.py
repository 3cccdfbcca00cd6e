"""Shared test utilities: finite-difference gradient oracle and small fixtures."""
from __future__ import annotations

import numpy as np


def finite_diff_grads(loss_fn, params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar loss w.r.t. each array element.

    loss_fn() reads the (mutated in place) param arrays and returns a float.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            gflat[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_grad_err(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Relative error between gradient lists, as a ratio of stacked 2-norms."""
    a = np.concatenate([x.reshape(-1) for x in analytic])
    n = np.concatenate([x.reshape(-1) for x in numeric])
    denom = max(np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
