"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a| + |n|, floor)``; the floor keeps near-zero gradients sane."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               max_coords: int | None = 20, rng: np.random.Generator | None = None,
               per_param: bool = False):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    Up to ``max_coords`` coordinates per parameter are sampled (all of them
    when ``None``). Returns the worst relative error, or one error per
    parameter when ``per_param`` is set.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else \
            rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + step
                fp = f().item()
                flat[c] = orig - step
                fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, float(relative_error(a.reshape(-1)[c], num)))
        errors.append(worst)
    return errors if per_param else max(errors, default=0.0)
