"""Central finite-difference gradient checking.

The function under test is reduced to a scalar by contracting its output
with a fixed random cotangent, so every output element participates. The
analytic gradient is taken at the requested dtype; the numerical reference
always runs in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def _scalarise(fn, arrays, cotangent, dtype, requires_grad):
    tensors = [Tensor(np.asarray(a, dtype=dtype), requires_grad=requires_grad) for a in arrays]
    out = fn(*tensors)
    if cotangent is None:
        return out, tensors
    return (out * Tensor(cotangent.astype(dtype))).sum(), tensors


def numerical_grad(fn: Callable, arrays: Sequence[np.ndarray], cotangent: np.ndarray | None, h: float = 1e-6):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalarise(fn, arrays, cotangent, np.float64, False)[0].item()
            flat[i] = orig - h
            fm = _scalarise(fn, arrays, cotangent, np.float64, False)[0].item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(
    fn: Callable,
    arrays: Sequence[np.ndarray],
    dtype=np.float32,
    seed: int = 0,
    h: float = 1e-6,
) -> list[float]:
    """Return the max-normalised error ``max|analytic - numeric| / max|numeric|`` per input."""
    rng = np.random.default_rng(seed)
    probe = fn(*[Tensor(np.asarray(a, dtype=np.float64)) for a in arrays])
    cotangent = None if probe.size == 1 else rng.standard_normal(probe.shape)
    loss, tensors = _scalarise(fn, arrays, cotangent, dtype, True)
    loss.backward()
    numeric = numerical_grad(fn, arrays, cotangent, h=h)
    errors = []
    for t, n in zip(tensors, numeric):
        a = np.zeros_like(n) if t.grad is None else t.grad.astype(np.float64)
        scale = max(float(np.abs(n).max()), 1e-12)
        errors.append(float(np.abs(a - n).max()) / scale)
    return errors
