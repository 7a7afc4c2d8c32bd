"""Finite-difference validation of analytic gradients, run in double precision."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, backward


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: np.ndarray,
                      eps: float = 1e-4) -> float:
    """Compare the analytic gradient of a scalar function against central
    differences at ``point``.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    The function is evaluated in float64 regardless of the point's dtype.
    """
    if not (1e-6 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    point = np.asarray(point, dtype=np.float64)

    x = Tensor(point.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = fn(x)
    if y.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {tuple(y.shape)}")
    if not np.isfinite(y.item()):
        raise ValueError("function value is not finite at the check point")
    backward(tape, y)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)

    def value_at(p: np.ndarray) -> float:
        v = fn(Tensor(p, requires_grad=False, dtype=np.float64)).item()
        if not np.isfinite(v):
            raise ValueError("function value is not finite near the check point")
        return v

    flat = point.reshape(-1)
    numeric = np.zeros_like(flat)
    for k in range(flat.size):
        stepped = flat.copy()
        stepped[k] = flat[k] + eps
        fp = value_at(stepped.reshape(point.shape))
        stepped[k] = flat[k] - eps
        fm = value_at(stepped.reshape(point.shape))
        numeric[k] = (fp - fm) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
