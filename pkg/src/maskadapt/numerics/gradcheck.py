"""Central-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], theta: Tensor, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` wrt ``theta`` (perturbed in place)."""
    flat = theta.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(np.float64(f().data))
        flat[i] = orig - eps
        fm = float(np.float64(f().data))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(theta.shape)


def grad_check(f: Callable[[], Tensor], theta: Tensor, eps: float = 1e-4, floor: float = 1e-6) -> float:
    """Max elementwise relative error between tape and central-difference gradients.

    ``f`` is re-evaluated from scratch on each call and must return a scalar
    Tensor that depends on ``theta``.  Relative error is
    ``|a - b| / max(|a|, |b|, floor)``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    theta.requires_grad = True
    theta.grad = None
    out = f()
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise TypeError(f"grad_check needs a scalar-valued function, got output of shape {shape}")
    out.backward()
    tape = np.zeros(theta.shape) if theta.grad is None else theta.grad.astype(np.float64)
    num = numeric_grad(f, theta, eps)
    denom = np.maximum(np.maximum(np.abs(tape), np.abs(num)), floor)
    return float((np.abs(tape - num) / denom).max())
