"""Soft token-to-slot routing: the plain Soft-MoE layer and the shared-plus-soft variant.

Shapes follow numpy conventions with optional leading batch axes: tokens
``X`` are (..., m, d), the slot matrix ``phi`` is (d, n*p), and slot ``i``
belongs to expert ``i // p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import attention, sub_rng
from .numerics import LayerNorm, Linear, Module, NumericsError, Parameter, Tensor, ops, xavier_uniform


def dispatch_weights(X: Tensor, phi: Tensor) -> Tensor:
    """Column softmax of the slot logits: every slot's weights over tokens sum to 1."""
    return ops.softmax(ops.matmul(X, phi), axis=-2)


def dispatch_inputs(X: Tensor, D: Tensor) -> Tensor:
    """Slot inputs ``D^T X``; each row is a convex combination of token rows."""
    if D.shape[-2] != X.shape[-2]:
        raise NumericsError(f"dispatch: {D.shape[-2]} token weights for {X.shape[-2]} tokens")
    return ops.matmul(ops.swap_last(D), X)


class GegluExpert(Module):
    """Two-layer GEGLU feed-forward: ``W_out(dropout(GELU(a) * b))`` with ``[a, b] = W_in x``."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None, dropout: float = 0.1):
        hidden = 2 * d if hidden is None else hidden
        self.w_in = Linear(d, 2 * hidden, rng)
        self.w_out = Linear(hidden, d, rng)
        self.rate = dropout
        self.hidden = hidden

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        a, b = ops.split_halves(self.w_in(x))
        h = ops.mul(ops.gelu(a), b)
        if self.training and rng is not None and self.rate > 0:
            h = ops.dropout(h, rng.random(h.shape) >= self.rate, self.rate)
        return self.w_out(h)


def run_experts(slots: Tensor, experts, p: int, rng: np.random.Generator | None = None) -> Tensor:
    """Apply expert ``j`` to slots ``j*p .. j*p+p-1`` and stack the results back in slot order."""
    outs = []
    for j, expert in enumerate(experts):
        outs.append(expert(ops.getitem(slots, (Ellipsis, slice(j * p, (j + 1) * p), slice(None))), rng))
    return outs[0] if len(outs) == 1 else ops.concat(outs, axis=-2)


def _register_experts(owner: Module, d, n, seed, name, hidden, dropout) -> list[GegluExpert]:
    """Attach experts as ``expert1..expertN`` so parameter names stay flat."""
    experts = []
    for j in range(1, n + 1):
        e = GegluExpert(d, sub_rng(seed, f"{name}.expert{j}"), hidden, dropout)
        setattr(owner, f"expert{j}", e)
        experts.append(e)
    return experts


class SoftMoE(Module):
    def __init__(self, d: int, n_experts: int, slots_per_expert: int, seed: int = 0,
                 hidden: int | None = None, dropout: float = 0.1, name: str = "softmoe"):
        if n_experts < 1 or slots_per_expert < 1:
            raise ValueError("need at least one expert and one slot")
        self.n, self.p = n_experts, slots_per_expert
        self.phi = Parameter(xavier_uniform(sub_rng(seed, name + ".phi"), d, n_experts * slots_per_expert))
        self._experts = _register_experts(self, d, n_experts, seed, name, hidden, dropout)
        self._last: dict = {}

    @property
    def experts(self) -> list[GegluExpert]:
        return self._experts

    def forward(self, X: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        logits = ops.matmul(X, self.phi)
        D = ops.softmax(logits, axis=-2)
        C = ops.softmax(logits, axis=-1)
        Y_slots = run_experts(dispatch_inputs(X, D), self.experts, self.p, rng)
        self._last = {"dispatch": D.data, "combine": C.data}
        return ops.matmul(C, Y_slots)


def softmoe_forward(X: Tensor, phi: Tensor, experts, p: int, rng=None) -> tuple[Tensor, np.ndarray]:
    """Functional form; returns the output and the combine matrix."""
    logits = ops.matmul(X, phi)
    D = ops.softmax(logits, axis=-2)
    C = ops.softmax(logits, axis=-1)
    return ops.matmul(C, run_experts(dispatch_inputs(X, D), experts, p, rng)), C.data


class CombineModule(Module):
    """Turns slot logits (..., m, n*p) into row-stochastic combine weights.

    Default: multi-head attention over tokens at ``width`` with an output
    projection back to n*p. ``literal=True`` uses square (n*p)x(n*p)
    single-head projections and no output projection.
    """

    def __init__(self, n_slots: int, seed: int = 0, width: int = 512, heads: int = 4,
                 literal: bool = False, name: str = "combine"):
        inner = n_slots if literal else width
        self.heads = 1 if literal else heads
        if inner % self.heads:
            raise ValueError(f"{heads} heads do not divide width {width}")
        self.literal = literal
        r = lambda part: sub_rng(seed, f"{name}.{part}")  # noqa: E731
        self.w_q = Linear(n_slots, inner, r("w_q"), bias=False)
        self.w_k = Linear(n_slots, inner, r("w_k"), bias=False)
        self.w_v = Linear(n_slots, inner, r("w_v"), bias=False)
        self.w_o = None if literal else Linear(inner, n_slots, r("w_o"))
        self.norm = LayerNorm(n_slots, eps=1e-8)
        self.proj = Linear(n_slots, n_slots, r("proj"))
        self._last_attention: np.ndarray | None = None

    def forward(self, logits: Tensor) -> Tensor:
        h, w = attention(self.w_q(logits), self.w_k(logits), self.w_v(logits), self.heads)
        self._last_attention = w
        if self.w_o is not None:
            h = self.w_o(h)
        # per-row normalisation over the slot axis keeps token equivariance
        return ops.softmax(self.proj(self.norm(h)), axis=-1)


def combine_weights(logits: Tensor, module: CombineModule) -> Tensor:
    return module(logits)


class SSMoE(Module):
    """Shared expert on every token plus soft-routed collaborative experts.

    ``Y = shared(X) + C @ experts(D^T X)`` where ``D`` is the column softmax of
    ``X phi`` and ``C`` comes from the combine module applied to ``X phi``.
    """

    def __init__(self, d: int, n_experts: int = 6, slots_per_expert: int = 4, seed: int = 0,
                 hidden: int | None = None, dropout: float = 0.1, combine_width: int = 512,
                 combine_heads: int = 4, literal_combine: bool = False, name: str = "ssmoe"):
        if n_experts < 1 or slots_per_expert < 1:
            raise ValueError("need at least one expert and one slot")
        self.n, self.p = n_experts, slots_per_expert
        self.phi = Parameter(xavier_uniform(sub_rng(seed, name + ".phi"), d, n_experts * slots_per_expert))
        self.shared = GegluExpert(d, sub_rng(seed, name + ".shared"), hidden, dropout)
        self._experts = _register_experts(self, d, n_experts, seed, name, hidden, dropout)
        self.combine = CombineModule(n_experts * slots_per_expert, seed, combine_width, combine_heads,
                                     literal_combine, name=name + ".combine")
        self._last: dict = {}

    @property
    def experts(self) -> list[GegluExpert]:
        return self._experts

    def forward(self, X: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        logits = ops.matmul(X, self.phi)
        D = ops.softmax(logits, axis=-2)
        Y_slots = run_experts(dispatch_inputs(X, D), self.experts, self.p, rng)
        C = self.combine(logits)
        self._last = {"dispatch": D.data, "combine": C.data}
        return ops.add(self.shared(X, rng), ops.matmul(C, Y_slots))


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass(frozen=True)
class RoutingCost:
    """Multiply-accumulate counts per forward pass, split by stage."""

    dispatch: int
    experts: int
    combine: int
    shared: int = 0

    @property
    def total(self) -> int:
        return self.dispatch + self.experts + self.combine + self.shared


def routing_flops(m: int, d: int, n: int, p: int, hidden: int | None = None, variant: str = "soft",
                  combine_width: int = 512) -> RoutingCost:
    """MAC count of one routed layer; elementwise work (softmax, GELU) is not counted."""
    if min(m, d, n, p) < 1:
        raise ValueError("all sizes must be positive")
    hidden = 2 * d if hidden is None else hidden
    s = n * p
    per_token_expert = d * 2 * hidden + hidden * d
    dispatch = m * d * s + s * m * d  # logits, then D^T X
    experts = s * per_token_expert
    mix = m * s * d  # C @ Y_slots
    if variant == "soft":
        return RoutingCost(dispatch, experts, mix)
    if variant == "ssmoe":
        w = combine_width
        attn = 3 * m * s * w + 2 * m * m * w + m * w * s
        return RoutingCost(dispatch, experts, mix + attn + m * s * s, shared=m * per_token_expert)
    raise ValueError(f"unknown variant {variant!r}")
