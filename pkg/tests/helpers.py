"""Shared test utilities, chiefly the finite-difference gradient oracle.

The oracle only re-runs forward passes, so it stays independent of the
backward implementation it checks.
"""

from __future__ import annotations

import numpy as np

from samic import tensor as T


def numerical_grad(f, tensors, h: float = 1e-5):
    """Central finite differences of the scalar closure ``f`` w.r.t. the
    data of each tensor, evaluated in 64-bit."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation normalised by the gradient magnitude."""
    denom = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


def gradcheck(f, tensors, tol: float, h: float = 1e-5) -> float:
    """Assert analytic gradients of ``f`` match finite differences."""
    for t in tensors:
        assert t.requires_grad, "gradcheck targets must require grad"
        t.grad = None
    loss = f()
    T.backward(loss)
    worst = 0.0
    for t, numeric in zip(tensors, numerical_grad(f, tensors, h)):
        err = max_rel_err(t.grad, numeric)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol:.0e}"
    return worst


def rand_tensor(rng, shape, lo=-2.0, hi=2.0, requires_grad=True):
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad)
