"""Attention and positional helpers shared by the encoder, decoder and combine module."""

from __future__ import annotations

import zlib
from functools import lru_cache

import numpy as np

from .numerics import Tensor, ops


def sub_rng(seed: int, name: str) -> np.random.Generator:
    """Per-submodule generator, so adding a layer never shifts another layer's init."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@lru_cache(maxsize=32)
def _pe_table(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, D, 2)[None, :]
    angle = pos / np.power(10000.0, i / D)
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : D // 2])
    pe.setflags(write=False)
    return pe


def sinusoidal_pe(T: int, D: int) -> np.ndarray:
    if D % 2:
        raise ValueError("positional table needs an even width")
    return _pe_table(T, D)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, H*dk) -> (..., H, L, dk)"""
    *lead, L, W = x.shape
    if W % heads:
        raise ValueError(f"{heads} heads do not divide width {W}")
    y = ops.reshape(x, (*lead, L, heads, W // heads))
    n = y.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return ops.transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, L, dk) -> (..., L, H*dk)"""
    *lead, H, L, dk = x.shape
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return ops.reshape(ops.transpose(x, axes), (*lead, L, H * dk))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with ``heads`` heads over the second-to-last axis.

    Returns the merged output and the weight array (..., H, Lq, Lk) for inspection.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    dk = qh.shape[-1]
    logits = ops.scaled_div_sqrt(ops.matmul(qh, ops.swap_last(kh)), dk)
    w = ops.softmax(logits, axis=-1)
    return merge_heads(ops.matmul(w, vh)), w.data
