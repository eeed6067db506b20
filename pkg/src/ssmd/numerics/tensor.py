"""Dense float64 tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor`. When grad recording is enabled and
any input requires a gradient, the output keeps references to its parents
and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks that graph once in reverse topological order
and then frees it.

Arrays carry arbitrary leading (batch) dimensions; softmax, norms and
matmul work on the trailing axes the way numpy does.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "NumericsError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "mix",
    "softmax",
    "layer_norm",
    "instance_norm",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "dropout",
    "concat",
    "split",
    "split_halves",
    "transpose",
    "swap_last",
    "reshape",
    "getitem",
    "pad",
    "sum",
    "mean",
    "scaled_div_sqrt",
    "conv2d",
    "depthwise_conv1d",
]

_GRAD_ENABLED = True


class NumericsError(FloatingPointError):
    """Raised on shape errors, non-finite results or misuse of the tape."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None
        self._freed = False

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass -----------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise NumericsError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise NumericsError("graph already consumed; run the forward pass again")
        if not self.requires_grad:
            raise NumericsError("backward() called on a tensor that is not on a recorded graph")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True
        self._freed = True


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to survive deep graphs."""
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    post.reverse()
    return post


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite output from {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise NumericsError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def scaled_div_sqrt(a, d: float) -> Tensor:
    """``a / sqrt(d)``, the attention-logit scaling."""
    if d <= 0:
        raise NumericsError("scaled_div_sqrt needs d > 0")
    return scale(a, 1.0 / math.sqrt(d))


def mix(beta, a, b) -> Tensor:
    """``beta * a + (1 - beta) * b`` with a learnable (usually scalar) beta."""
    beta, a, b = as_tensor(beta), as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mix")
    bd = beta.data
    diff = a.data - b.data
    # this form is exact at both endpoints: beta=1 returns a, beta=0 returns b
    out = bd * a.data + (1.0 - bd) * b.data

    def back(g):
        return (
            _unbroadcast(g * diff, bd.shape) if beta.requires_grad else None,
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * (1.0 - bd), b.shape) if b.requires_grad else None,
        )

    return _make(out, (beta, a, b), back, "mix")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise NumericsError(f"matmul: incompatible batch dims {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise NumericsError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``axis=-1`` is row-softmax, ``axis=-2`` column-softmax."""
    x = as_tensor(x)
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optionally apply ``gamma`` / ``beta``."""
    x = as_tensor(x)
    n = x.shape[-1]
    if gamma is not None and gamma.shape != (n,):
        raise NumericsError(f"layer_norm: gamma shape {gamma.shape} != ({n},)")
    if beta is not None and beta.shape != (n,):
        raise NumericsError(f"layer_norm: beta shape {beta.shape} != ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def back(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gamma is not None:
            res.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            res.append(_unbroadcast(g, beta.shape))
        return tuple(res)

    return _make(out, parents, back, "layer_norm")


def instance_norm(x, eps: float = 1e-8) -> Tensor:
    """Per-row (token) normalisation across the feature axis, no affine."""
    return layer_norm(x, None, None, eps=eps)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = xd * cdf

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(out, (x,), back, "gelu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = special.expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _make(y, (x,), lambda g: (g / xd,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def dropout(x, keep_mask: np.ndarray | None, rate: float) -> Tensor:
    """Inverted dropout with an externally supplied boolean keep mask.

    ``keep_mask=None`` (inference) is the identity.
    """
    x = as_tensor(x)
    if keep_mask is None or rate == 0.0:
        return x
    keep_mask = np.asarray(keep_mask)
    if keep_mask.shape != x.shape:
        raise NumericsError(f"dropout mask shape {keep_mask.shape} != {x.shape}")
    factor = keep_mask.astype(np.float64) / (1.0 - rate)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


# ---------------------------------------------------------------------------
# structural ops


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise NumericsError("concat of empty list")
    ax = _axis(xs[0], axis)
    try:
        out = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError as exc:
        raise NumericsError(f"concat: shape mismatch {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return _make(out, xs, back, "concat")


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    ax = _axis(x, axis)
    if int(np.sum(sizes)) != x.shape[ax]:
        raise NumericsError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[ax]}")
    out = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


def split_halves(x, axis: int = -1) -> tuple[Tensor, Tensor]:
    x = as_tensor(x)
    n = x.shape[axis]
    if n % 2:
        raise NumericsError(f"split_halves needs an even axis, got {n}")
    a, b = split(x, [n // 2, n // 2], axis=axis)
    return a, b


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise NumericsError(f"reshape {orig} -> {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), back, "getitem")


def pad(x, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one ``(before, after)`` pair per axis."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise NumericsError("pad widths must cover every axis")
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[sl],), "pad")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# convolutions (channels-last)


def conv2d(x, w, b=None, stride: tuple[int, int] = (1, 1), padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D cross-correlation on channels-last input.

    ``x``: (B, H, W, Cin), ``w``: (kh, kw, Cin, Cout), ``b``: (Cout,).
    Returns (B, Ho, Wo, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise NumericsError(f"conv2d: shape mismatch x{x.shape} w{w.shape}")
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    B, Hp, Wp, _ = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise NumericsError(f"conv2d: input {x.shape} too small for kernel {w.shape[:2]}")
    wd = w.data
    out = np.zeros((B, Ho, Wo, cout))
    slices = []
    for u in range(kh):
        for v in range(kw):
            sl = (slice(None), slice(u, u + sh * (Ho - 1) + 1, sh), slice(v, v + sw * (Wo - 1) + 1, sw), slice(None))
            slices.append((u, v, sl))
            out += xp[sl] @ wd[u, v]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def back(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        g2 = g.reshape(-1, cout)
        for u, v, sl in slices:
            if gw is not None:
                gw[u, v] = xp[sl].reshape(-1, cin).T @ g2
            if gxp is not None:
                gxp[sl] += g @ wd[u, v].T
        res = [None if gxp is None else gxp[:, ph:Hp - ph, pw:Wp - pw, :], gw]
        if b is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(out, parents, back, "conv2d")


def depthwise_conv1d(x, w, b=None) -> Tensor:
    """Depthwise 'same' convolution along the second-to-last (time) axis.

    ``x``: (..., T, C), ``w``: (K, C) with K odd, ``b``: (C,).
    """
    x, w = as_tensor(x), as_tensor(w)
    K, C = w.shape
    if K % 2 == 0 or x.shape[-1] != C:
        raise NumericsError(f"depthwise_conv1d: x{x.shape} w{w.shape}")
    half = K // 2
    T = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, widths)
    wd = w.data
    out = np.zeros(x.shape)
    for k in range(K):
        out += xp[..., k:k + T, :] * wd[k]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        gflat = g.reshape(-1, C)
        for k in range(K):
            gxp[..., k:k + T, :] += g * wd[k]
            gw[k] = (xp[..., k:k + T, :].reshape(-1, C) * gflat).sum(axis=0)
        res = [gxp[..., half:half + T, :], gw]
        if b is not None:
            res.append(gflat.sum(axis=0))
        return tuple(res)

    return _make(out, parents, back, "depthwise_conv1d")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
