"""Shared oracles: central finite differences and relative-error comparison."""

from __future__ import annotations

import numpy as np
import pytest


def finite_difference(f, arrays, eps=1e-5):
    """Central-difference gradient of the scalar f() w.r.t. each array.

    Arrays are perturbed in place and restored; f must recompute from them.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
