from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NumericsError, Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)  # per-tensor update count for bias correction

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    grads: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are skipped (their moments are left untouched). Bias correction
    uses each tensor's own update count, so tensors that join the trainable
    set later start with a properly corrected first step.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise NumericsError(f"adam: grad shape {g.shape} != param {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        t = state.counts[name] = state.counts.get(name, 0) + 1
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
