"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .core import Tensor


def numeric_grad(fn, arr, h=1e-3, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``arr`` (mutated in place).

    ``indices`` restricts the check to a subset of flat positions.
    """
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        out[int(i)] = (plus - minus) / (2 * h)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    return np.abs(analytic - numeric) / (np.abs(analytic) + floor)


def check_gradients(fn, tensors, h=1e-3, max_entries=None, rng=None):
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph from the current contents of ``tensors`` on
    every call. Returns the maximum relative error over the checked entries,
    using ``|a - n| / (|a| + 1e-6)``.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def scalar():
        return fn().item()

    worst = 0.0
    for t, a in zip(tensors, analytic):
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_entries, replace=False)
        num = numeric_grad(scalar, t.data, h, idx)
        keys = np.fromiter(num.keys(), dtype=np.int64)
        n = np.fromiter(num.values(), dtype=np.float64)
        err = relative_error(a.reshape(-1)[keys], n)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def weighted_sum(out, weights):
    """Scalar probe ``sum(out * weights)`` used to reduce non-scalar outputs."""
    from . import ops

    return ops.sum(ops.mul(out, Tensor(weights, dtype=out.dtype)))
