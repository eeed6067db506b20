from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumericsError, Tensor, no_grad


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between backprop and central differences.

    ``f(x)`` must return a scalar tensor. ``x`` may be one tensor or a list
    of tensors (e.g. every parameter of a layer). With ``max_coords`` set, a
    seeded random subset of coordinates per tensor is probed.

    The per-coordinate error is ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None

    loss = f(x)
    if loss.size != 1 or not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: f(x) must be a finite scalar")
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            a_flat = a.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericsError("grad_check: non-finite f(x) under perturbation")
                c = (fp - fm) / (2.0 * h)
                err = abs(a_flat[i] - c) / (abs(a_flat[i]) + abs(c) + 1e-12)
                worst = max(worst, err)
    for t, flag in zip(xs, flags):
        t.requires_grad = flag
        t.grad = None
    return worst
