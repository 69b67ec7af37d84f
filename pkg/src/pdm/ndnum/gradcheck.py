"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from pdm.ndnum.tensor import Tensor, backward


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x)).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        backward(out, leaves=[xt])
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    a = analytic_grad(f, data)
    n = numeric_grad(f, data, eps)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))
