"""Memory-aware speaker embedding retrieval with stacked two-layer cross-attention blocks.

Within a block, layer 1 scores every memory row against the speaker query
and rescales the rows by those weights; layer 2 attends over the rescaled
rows and returns their renormalised weighted sum, so the output always
lies in the convex hull of the memory rows. The block output is added back
onto the query (through a learned projection) for the next block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import sub_rng
from .numerics import Linear, Module, NumericsError, Tensor, ops


@dataclass
class MamseEmbedding:
    E_M: Tensor  # (..., N, D_M)
    traces: list[dict] = field(default_factory=list)  # per block: {"a": ..., "b": ...}
    empty: np.ndarray | None = None


def select_speaker_features(F: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Per-speaker mean of the frames each mask row selects.

    ``F`` is (..., T, D) and ``mask`` (..., N, T). Speakers with an empty
    row get a zero vector and are flagged in the returned boolean array.
    """
    S = np.asarray(mask, dtype=np.float64)
    if S.shape[-1] != F.shape[-2]:
        raise NumericsError(f"mask width {S.shape[-1]} != {F.shape[-2]} frames")
    count = S.sum(axis=-1, keepdims=True)
    empty = count[..., 0] == 0
    weights = S / np.where(count > 0, count, 1.0)
    return ops.matmul(ops.as_tensor(weights), F), empty


class DimBlock(Module):
    def __init__(self, d_model: int, d_memory: int, seed: int = 0, name: str = "dim.b1"):
        # bare matrices: a key-side bias would shift every logit in a row equally
        self.w_q1 = Linear(d_model, d_model, sub_rng(seed, name + ".w_q1"), bias=False)
        self.w_k1 = Linear(d_memory, d_model, sub_rng(seed, name + ".w_k1"), bias=False)
        self.w_q2 = Linear(d_model, d_model, sub_rng(seed, name + ".w_q2"), bias=False)
        self.w_k2 = Linear(d_memory, d_model, sub_rng(seed, name + ".w_k2"), bias=False)
        self.update = Linear(d_memory, d_model, sub_rng(seed, name + ".update"), bias=False)
        self.d_memory = d_memory

    def forward(self, q: Tensor, M: Tensor) -> tuple[Tensor, Tensor, dict]:
        """``q`` (..., N, D), ``M`` (K, D_M) -> (h2 (..., N, D_M), next query, trace)."""
        a = ops.softmax(ops.scaled_div_sqrt(ops.matmul(self.w_q1(q), ops.swap_last(self.w_k1(M))), self.d_memory), -1)
        # H1 = diag(a) M per speaker: (..., N, K, D_M)
        H1 = ops.mul(ops.reshape(a, (*a.shape, 1)), M)
        keys = self.w_k2(H1)  # (..., N, K, D)
        q2 = self.w_q2(q)
        logits2 = ops.matmul(ops.reshape(q2, (*q2.shape[:-1], 1, q2.shape[-1])), ops.swap_last(keys))
        b = ops.softmax(ops.scaled_div_sqrt(ops.reshape(logits2, a.shape), self.d_memory), -1)
        w = ops.mul(b, a)
        w = ops.div(w, ops.sum(w, axis=-1, keepdims=True))
        h2 = ops.matmul(w, M)
        return h2, ops.add(q, self.update(h2)), {"a": a.data, "b": b.data}


class DimStack(Module):
    def __init__(self, d_model: int, d_memory: int, n_blocks: int = 3, seed: int = 0, name: str = "dim"):
        blocks = [DimBlock(d_model, d_memory, seed, f"{name}.b{i}") for i in range(1, n_blocks + 1)]
        self._blocks = blocks
        for i, blk in enumerate(blocks, start=1):
            setattr(self, f"b{i}", blk)

    def forward(self, F_S: Tensor, M: Tensor, empty: np.ndarray | None = None) -> MamseEmbedding:
        return retrieve_mamse_embedding(F_S, M, self._blocks, empty)


def retrieve_mamse_embedding(F_S: Tensor, M: Tensor, blocks, empty: np.ndarray | None = None) -> MamseEmbedding:
    """Chain the blocks per speaker; empty-mask speakers fall back to the memory mean."""
    M = ops.as_tensor(M)
    q = F_S
    traces = []
    h2 = None
    for blk in blocks:
        h2, q, tr = blk(q, M)
        traces.append(tr)
    if empty is not None and np.any(empty):
        keep = (~empty).astype(np.float64)[..., None]
        h2 = ops.add(ops.mul(h2, keep), ops.mul(ops.as_tensor(1.0 - keep), ops.mean(M, axis=0)))
    return MamseEmbedding(h2, traces, empty)


def aggregate_embedding(E_M: Tensor, ivec, d_model: int | None = None) -> Tensor:
    """Row-wise ``[E_M ; ivec]``."""
    ivec = ops.as_tensor(ivec)
    if E_M.shape[:-1] != ivec.shape[:-1]:
        raise NumericsError(f"embedding rows {E_M.shape} vs ivec rows {ivec.shape}")
    if d_model is not None and E_M.shape[-1] + ivec.shape[-1] != d_model:
        raise NumericsError(f"D_M + D_iv = {E_M.shape[-1] + ivec.shape[-1]} != D = {d_model}")
    return ops.concat([E_M, ivec], axis=-1)


__all__ = [
    "DimBlock",
    "DimStack",
    "MamseEmbedding",
    "aggregate_embedding",
    "retrieve_mamse_embedding",
    "select_speaker_features",
]
