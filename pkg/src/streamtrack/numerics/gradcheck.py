"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn, inputs, wrt: int, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. one input."""
    base = [np.array(x.data, copy=True) for x in inputs]
    g = np.zeros_like(base[wrt])
    flat = g.reshape(-1)
    src = base[wrt].reshape(-1)
    for i in range(flat.size):
        orig = src[i]
        src[i] = orig + eps
        hi = float(fn(*[Tensor(b) for b in base]).data)
        src[i] = orig - eps
        lo = float(fn(*[Tensor(b) for b in base]).data)
        src[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return g


def check_gradients(fn, inputs, eps: float = 1e-4, tol: float = 1e-3) -> float:
    """Compare autodiff gradients of scalar ``fn`` against central differences.

    Returns the worst relative error over all input elements and raises
    AssertionError when it exceeds ``tol``. The relative error uses
    max(|analytic|, |numeric|, 1.0) as the denominator so that near-zero
    gradients are compared absolutely.
    """
    tensors = [Tensor(np.array(x.data if isinstance(x, Tensor) else x,
                               dtype=np.float64), requires_grad=True)
               for x in inputs]
    with Tape() as tape:
        out = fn(*tensors)
        if out.data.shape != ():
            raise ValueError("check_gradients needs a scalar-valued function")
        tape.backward(out)

    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(fn, tensors, i, eps=eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        rel = np.abs(analytic - numeric) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    if worst > tol:
        raise AssertionError(f"gradient check failed: max rel error {worst:.3e} > {tol:.1e}")
    return worst
