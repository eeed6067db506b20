"""Per-layer gradient checks and the routing cost/latency benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .layers import sinusoidal_pe
from .mamse import DimBlock
from .model import ConformerBlock, ConvFrontend, ModelConfig, OutputLayer, SDBlock
from .moe import SoftMoE, SSMoE, routing_flops
from .numerics import Tensor, grad_check, no_grad, ops

GRAD_TOLERANCE = 1e-4


def _weighted(y: Tensor, seed: int) -> Tensor:
    # random weights keep every output coordinate in play
    return ops.sum(ops.mul(y, np.random.default_rng(seed).standard_normal(y.shape)))


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def layer_gradchecks(seed: int = 0, max_coords: int = 12) -> dict[str, float]:
    """Largest relative backprop-vs-finite-difference error per layer at toy shapes."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    fe = ConvFrontend(6, 2, 4, seed=seed)
    fe.conv1_b.data[...] = 0.1  # nonzero biases exercise their gradient path
    fe.conv2_b.data[...] = -0.1
    x = _leaf(rng, 1, 4, 6)
    out["conv_frontend"] = grad_check(lambda _: _weighted(fe(x), seed), fe.parameters() + [x], max_coords=max_coords)

    blk = ConformerBlock(8, 2, 2, 3, seed=seed, name="encoder.L1")
    x = _leaf(rng, 1, 5, 8)
    out["conformer_block"] = grad_check(lambda _: _weighted(blk(x), seed), blk.parameters() + [x],
                                        max_coords=max_coords)

    cfg = ModelConfig(n_mels=8, d_model=16, d_memory=12, d_ivec=4, n_speakers=2, t_chunk=4, heads=2,
                      combine_width=8, combine_heads=2, n_experts=2, slots_per_expert=2, seed=seed,
                      ssmoe_layers=(1,), dec_layers=1)
    for label, c in (("sd_block", ModelConfig.from_dict({**cfg.to_dict(), "ssmoe_layers": ()})),
                     ("sd_block_ssmoe", cfg)):
        sd = SDBlock(c, 1)
        sd.eval()
        for b, v in zip((sd.beta1, sd.beta2, sd.beta3), (0.3, 0.6, 0.8)):
            b.value.data[...] = v
        # distinct decoder rows: identical rows would zero the speaker self-attention gradients
        E_D, E_A, E_enc = _leaf(rng, 2, 16), _leaf(rng, 2, 16), _leaf(rng, 4, 16)
        pe = sinusoidal_pe(4, 16)
        out[label] = grad_check(lambda _: _weighted(sd(E_D, E_A, E_enc, pe), seed),
                                sd.parameters() + [E_D, E_A, E_enc], max_coords=max_coords)

    dim = DimBlock(6, 4, seed=seed)
    q = _leaf(rng, 2, 6)
    M = rng.standard_normal((5, 4))
    M = Tensor(M / np.linalg.norm(M, axis=1, keepdims=True))

    def dim_loss(_):
        h2, q_next, _traces = dim(q, M)
        return ops.add(_weighted(h2, seed), _weighted(q_next, seed + 1))

    out["dim_block"] = grad_check(dim_loss, dim.parameters() + [q], max_coords=max_coords)

    soft = SoftMoE(5, 2, 2, seed=seed)
    x = _leaf(rng, 4, 5)
    out["soft_moe"] = grad_check(lambda _: _weighted(soft(x), seed), soft.parameters() + [x], max_coords=max_coords)

    ss = SSMoE(8, n_experts=3, slots_per_expert=2, seed=seed, combine_width=16, combine_heads=4)
    ss.eval()
    x = _leaf(rng, 5, 8)
    out["ss_moe"] = grad_check(lambda _: _weighted(ss(x), seed), ss.parameters() + [x], max_coords=max_coords)

    head = OutputLayer(4, 3, seed=seed)
    e = _leaf(rng, 2, 4)
    out["output_layer"] = grad_check(lambda _: _weighted(head(e), seed), head.parameters() + [e],
                                     max_coords=max_coords)
    return out


# ---------------------------------------------------------------------------
# routing benchmark


@dataclass
class RoutingBenchRow:
    m: int
    d: int
    n_experts: int
    slots_per_expert: int
    macs: int
    latency_ms: float

    @property
    def slots(self) -> int:
        return self.n_experts * self.slots_per_expert


def soft_moe_latency(m: int, d: int, n: int, p: int, repeats: int = 20, warmup: int = 3, seed: int = 0) -> float:
    """Median wall time (s) of one inference-mode Soft-MoE forward on an m x d token matrix."""
    moe = SoftMoE(d, n, p, seed=seed)
    moe.eval()
    X = Tensor(np.random.default_rng(seed).standard_normal((m, d)))
    times = []
    with no_grad():
        for _ in range(warmup):
            moe(X)
        for _ in range(repeats):
            t0 = time.perf_counter()
            moe(X)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def routing_bench(m: int, d: int, experts, slots_per_expert, repeats: int = 20, seed: int = 0,
                  timed: bool = True) -> list[RoutingBenchRow]:
    """MACs (analytic) and measured latency for each (n, p) combination."""
    rows = []
    for n in experts:
        for p in slots_per_expert:
            macs = routing_flops(m, d, n, p).total
            lat = soft_moe_latency(m, d, n, p, repeats, seed=seed) * 1e3 if timed else float("nan")
            rows.append(RoutingBenchRow(m, d, n, p, macs, lat))
    return rows


def factorizations(total: int) -> list[tuple[int, int]]:
    return [(n, total // n) for n in range(1, total + 1) if total % n == 0]


def bench_csv(rows: list[RoutingBenchRow]) -> str:
    lines = ["m,d,n_experts,slots_per_expert,slots,macs,latency_ms"]
    for r in rows:
        lines.append(f"{r.m},{r.d},{r.n_experts},{r.slots_per_expert},{r.slots},{r.macs},{r.latency_ms:.4f}")
    return "\n".join(lines) + "\n"
