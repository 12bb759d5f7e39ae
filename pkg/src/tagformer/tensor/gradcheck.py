"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .core import Tensor, no_grad


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = float(fn().data)
        flat[i] = orig - eps
        with no_grad():
            lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-12)
    return float(num / den)


def check_gradients(fn, inputs, eps: float = 1e-6) -> float:
    """Largest relative error between analytic and numeric gradients.

    ``fn`` builds a scalar Tensor from ``inputs``; each input must be a
    float64 Tensor with ``requires_grad``.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(fn, t.data, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def random_weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce a tensor to a scalar with fixed random weights (exercises every output)."""
    w = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
    return (out * w).sum()
