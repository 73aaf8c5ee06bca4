"""Finite-difference gradient checking.

Central differences at 64-bit; used by the test suite and the CLI
`gradcheck` subcommand.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, t, h=1e-5):
    """Central-difference gradient of scalar fn() w.r.t. tensor t's entries."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn().data)
        flat[i] = orig - h
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-3):
    """max |a-b| / max(|a|+|b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn, wrt, h=1e-5, tol=1e-4):
    """Compare autodiff and finite-difference gradients.

    fn() must rebuild the scalar loss from the current contents of the
    tensors in `wrt`.  Returns the worst relative error; raises AssertionError
    above `tol`.
    """
    for t in wrt:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in wrt:
        assert t.grad is not None, "gradient missing after backward()"
        numeric = numerical_grad(fn, t, h=h)
        err = relative_error(t.grad, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:.1e}"
    return worst


def rand_tensor(rng, shape, requires_grad=True, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)
