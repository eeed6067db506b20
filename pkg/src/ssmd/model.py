"""Sequence-to-sequence diarization network: conv front-end, conformer-lite encoder,
speaker-detection decoder with learnable fusion coefficients, and the per-speaker
output layer.

All forward passes accept a leading batch axis; unbatched inputs are promoted
and the output squeezed back.
"""

from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .layers import attention, sinusoidal_pe, sub_rng
from .mamse import DimStack, aggregate_embedding, select_speaker_features
from .moe import GegluExpert, SSMoE
from .numerics import LayerNorm, Linear, Module, NumericsError, Parameter, Scalar, Tensor, ops


@dataclass
class ModelConfig:
    n_mels: int = 40
    d_model: int = 64
    d_memory: int = 48
    d_ivec: int = 16
    n_speakers: int = 4
    t_chunk: int = 200
    conv_channels: int = 32
    enc_layers: int = 6
    dec_layers: int = 6
    heads: int = 4
    ffn_mult: int = 4
    conv_kernel: int = 15
    dim_blocks: int = 3
    memory_rows: int = 64
    ssmoe_layers: tuple[int, ...] = ()  # 1-based decoder layer indices
    n_experts: int = 6
    slots_per_expert: int = 4
    expert_hidden: int | None = None  # None -> 2 * d_model
    combine_width: int = 512
    combine_heads: int = 4
    literal_combine: bool = False
    dropout: float = 0.1
    beta_init: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.ssmoe_layers = tuple(sorted(int(i) for i in self.ssmoe_layers))
        if self.d_memory + self.d_ivec != self.d_model:
            raise ValueError(f"d_memory + d_ivec must equal d_model ({self.d_memory}+{self.d_ivec}!={self.d_model})")
        if self.d_model % self.heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by heads")
        if any(not 1 <= i <= self.dec_layers for i in self.ssmoe_layers):
            raise ValueError(f"SS-MoE placement {self.ssmoe_layers} outside 1..{self.dec_layers}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(d_model=512, d_memory=384, d_ivec=128, conv_channels=32, t_chunk=800)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown model config key {k!r}")
            kw[k] = coerce_field(k, v, cls.__dataclass_fields__[k].default)
        return cls(**kw)

    def with_moe(self, layers, **kw) -> "ModelConfig":
        return dataclasses.replace(self, ssmoe_layers=tuple(layers), **kw)


def coerce_field(key, value, default):
    """Parse a config string according to the type of the field's default."""
    if not isinstance(value, str):
        return value
    v = value.strip()
    if key == "ssmoe_layers" or isinstance(default, tuple):
        return tuple(int(x) for x in v.replace(" ", "").split(",") if x)
    if isinstance(default, str):
        return v
    if isinstance(default, bool):
        return v.lower() in ("1", "true", "yes", "on")
    if v.lower() == "none":
        return None
    if isinstance(default, float):
        return float(v)
    return int(v)


@contextlib.contextmanager
def _tag(module: str):
    try:
        yield
    except NumericsError as exc:
        if str(exc).startswith("["):
            raise
        raise NumericsError(f"[{module}] {exc}") from exc


# ---------------------------------------------------------------------------
# front-end and encoder


class ConvFrontend(Module):
    """Two 3x3 convolutions (frequency stride 2 on the first), GELU, flatten, project to D."""

    def __init__(self, n_mels: int, channels: int, d_model: int, seed: int = 0):
        if n_mels < 4:
            raise ValueError(f"{n_mels} mel bins are too few for the stride-2 front-end")
        r1, r2 = sub_rng(seed, "frontend.conv1"), sub_rng(seed, "frontend.conv2")
        self.conv1_w = Parameter(r1.standard_normal((3, 3, 1, channels)) * np.sqrt(2.0 / 9))
        self.conv1_b = Parameter(np.zeros(channels))
        self.conv2_w = Parameter(r2.standard_normal((3, 3, channels, channels)) * np.sqrt(2.0 / (9 * channels)))
        self.conv2_b = Parameter(np.zeros(channels))
        self.n_mels = n_mels
        self.f_out = (n_mels - 1) // 2 + 1
        self.proj = Linear(self.f_out * channels, d_model, sub_rng(seed, "frontend.proj"))

    def forward(self, X) -> Tensor:
        X = ops.as_tensor(X)
        if X.shape[-1] != self.n_mels:
            raise NumericsError(f"expected {self.n_mels} features, got {X.shape[-1]}")
        B, T, F = X.shape
        h = ops.reshape(X, (B, T, F, 1))
        h = ops.gelu(ops.conv2d(h, self.conv1_w, self.conv1_b, stride=(1, 2), padding=(1, 1)))
        h = ops.gelu(ops.conv2d(h, self.conv2_w, self.conv2_b, stride=(1, 1), padding=(1, 1)))
        return self.proj(ops.reshape(h, (B, T, h.shape[2] * h.shape[3])))


class FeedForward(Module):
    def __init__(self, d: int, mult: int, seed: int, name: str):
        self.norm = LayerNorm(d)
        self.up = Linear(d, mult * d, sub_rng(seed, name + ".up"))
        self.down = Linear(mult * d, d, sub_rng(seed, name + ".down"))

    def forward(self, x: Tensor) -> Tensor:
        return self.down(ops.gelu(self.up(self.norm(x))))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, seed: int, name: str):
        self.norm = LayerNorm(d)
        self.q = Linear(d, d, sub_rng(seed, name + ".q"))
        self.k = Linear(d, d, sub_rng(seed, name + ".k"), bias=False)
        self.v = Linear(d, d, sub_rng(seed, name + ".v"))
        self.out = Linear(d, d, sub_rng(seed, name + ".out"))
        self.heads = heads
        self._weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        o, self._weights = attention(self.q(h), self.k(h), self.v(h), self.heads)
        return self.out(o)


class ConvModule(Module):
    """Pointwise GLU, depthwise conv over time, GELU, pointwise projection."""

    def __init__(self, d: int, kernel: int, seed: int, name: str):
        self.norm = LayerNorm(d)
        self.pw_in = Linear(d, 2 * d, sub_rng(seed, name + ".pw_in"))
        self.dw_w = Parameter(sub_rng(seed, name + ".dw").uniform(-1, 1, (kernel, d)) / np.sqrt(kernel))
        self.dw_b = Parameter(np.zeros(d))
        self.pw_out = Linear(d, d, sub_rng(seed, name + ".pw_out"))

    def forward(self, x: Tensor) -> Tensor:
        a, b = ops.split_halves(self.pw_in(self.norm(x)))
        h = ops.mul(a, ops.sigmoid(b))
        h = ops.gelu(ops.depthwise_conv1d(h, self.dw_w, self.dw_b))
        return self.pw_out(h)


class ConformerBlock(Module):
    def __init__(self, d: int, heads: int, ffn_mult: int, kernel: int, seed: int, name: str):
        self.ff1 = FeedForward(d, ffn_mult, seed, name + ".ff1")
        self.mhsa = SelfAttention(d, heads, seed, name + ".mhsa")
        self.conv = ConvModule(d, kernel, seed, name + ".conv")
        self.ff2 = FeedForward(d, ffn_mult, seed, name + ".ff2")
        self.norm = LayerNorm(d)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, ops.scale(self.ff1(x), 0.5))
        x = ops.add(x, self.mhsa(x))
        x = ops.add(x, self.conv(x))
        x = ops.add(x, ops.scale(self.ff2(x), 0.5))
        return self.norm(x)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig):
        self._layers = []
        for i in range(1, cfg.enc_layers + 1):
            blk = ConformerBlock(cfg.d_model, cfg.heads, cfg.ffn_mult, cfg.conv_kernel, cfg.seed, f"encoder.L{i}")
            setattr(self, f"L{i}", blk)
            self._layers.append(blk)

    def forward(self, x: Tensor) -> Tensor:
        for blk in self._layers:
            x = blk(x)
        return x


# ---------------------------------------------------------------------------
# decoder


class SDBlock(Module):
    """Speaker-detection block.

    Speaker self-attention whose query and key are beta-weighted mixes of
    decoder-state and aggregate-embedding projections, then cross-attention
    from speakers to encoded frames (position added on the key side), then
    a GEGLU feed-forward or an SS-MoE layer.
    """

    def __init__(self, cfg: ModelConfig, index: int):
        d, s, name = cfg.d_model, cfg.seed, f"decoder.L{index}"
        r = lambda part: sub_rng(s, f"{name}.{part}")  # noqa: E731
        self.beta1 = Scalar(cfg.beta_init)
        self.beta2 = Scalar(cfg.beta_init)
        self.beta3 = Scalar(cfg.beta_init)
        self.dq1 = Linear(d, d, r("dq1"))
        self.aq1 = Linear(d, d, r("aq1"))
        # key projections carry no bias and key norms no shift: both would be softmax-invariant
        self.dk1 = Linear(d, d, r("dk1"), bias=False)
        self.ak1 = Linear(d, d, r("ak1"), bias=False)
        self.dv1 = Linear(d, d, r("dv1"))
        self.norm_q1 = LayerNorm(d)
        self.norm_k1 = LayerNorm(d, bias=False)
        self.norm_v1 = LayerNorm(d)
        self.out1 = Linear(d, d, r("out1"))
        self.fq2 = Linear(d, d, r("fq2"))
        self.aq2 = Linear(d, d, r("aq2"))
        self.ek2 = Linear(d, d, r("ek2"), bias=False)
        self.ev2 = Linear(d, d, r("ev2"))
        self.norm_q2 = LayerNorm(d)
        self.norm_k2 = LayerNorm(d, bias=False)
        self.norm_v2 = LayerNorm(d)
        self.out2 = Linear(d, d, r("out2"))
        self.norm_ff = LayerNorm(d)
        if index in cfg.ssmoe_layers:
            self.ssmoe = SSMoE(d, cfg.n_experts, cfg.slots_per_expert, s, cfg.expert_hidden, cfg.dropout,
                               cfg.combine_width, cfg.combine_heads, cfg.literal_combine, name=name + ".ssmoe")
            self._ff = self.ssmoe
        else:
            self.ffn = GegluExpert(d, r("ffn"), cfg.expert_hidden, cfg.dropout)
            self._ff = self.ffn
        self.heads = cfg.heads
        self._trace: dict = {}

    def fused_query1(self, E_D: Tensor, E_A: Tensor) -> Tensor:
        return ops.mix(self.beta1.value, self.dq1(E_D), self.aq1(E_A))

    def forward(self, E_D: Tensor, E_A: Tensor, E_enc: Tensor, pe: np.ndarray, rng=None) -> Tensor:
        q1 = self.norm_q1(self.fused_query1(E_D, E_A))
        k1 = self.norm_k1(ops.mix(self.beta2.value, self.dk1(E_D), self.ak1(E_A)))
        v1 = self.norm_v1(self.dv1(E_D))
        o1, w1 = attention(q1, k1, v1, self.heads)
        E_F = ops.add(E_D, self.out1(o1))

        q2 = self.norm_q2(ops.mix(self.beta3.value, self.fq2(E_F), self.aq2(E_A)))
        k2 = ops.add(self.norm_k2(self.ek2(E_enc)), pe)
        v2 = self.norm_v2(self.ev2(E_enc))
        o2, w2 = attention(q2, k2, v2, self.heads)
        x = ops.add(E_F, self.out2(o2))
        self._trace = {"speaker_attention": w1, "frame_attention": w2}
        return ops.add(x, self._ff(self.norm_ff(x), rng))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig):
        # one learned vector shared by every speaker slot keeps the stack speaker-equivariant
        self.ED = Parameter(sub_rng(cfg.seed, "decoder.ED").standard_normal(cfg.d_model) * 0.1)
        self._layers = []
        for i in range(1, cfg.dec_layers + 1):
            blk = SDBlock(cfg, i)
            setattr(self, f"L{i}", blk)
            self._layers.append(blk)
        self.norm = LayerNorm(cfg.d_model)

    @property
    def layers(self) -> list[SDBlock]:
        return self._layers

    def forward(self, E_A: Tensor, E_enc: Tensor, pe: np.ndarray, rng=None) -> Tensor:
        E_D = ops.mul(ops.as_tensor(np.ones(E_A.shape)), self.ED)
        for i, blk in enumerate(self._layers, start=1):
            with _tag(f"decoder.L{i}"):
                E_D = blk(E_D, E_A, E_enc, pe, rng)
        return self.norm(E_D)


class OutputLayer(Module):
    def __init__(self, d_model: int, t_chunk: int, seed: int = 0):
        self.proj = Linear(d_model, t_chunk, sub_rng(seed, "output.proj"))
        self.d_model = d_model

    def logits(self, E_dec: Tensor) -> Tensor:
        if E_dec.shape[-1] != self.d_model:
            raise NumericsError(f"decoder width {E_dec.shape[-1]} != {self.d_model}")
        return self.proj(E_dec)

    def forward(self, E_dec: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(E_dec))


class MemoryStore(Module):
    """Holds the memory bank. It is a named tensor for checkpointing, but the trainer never updates it."""

    def __init__(self, rows: int, dim: int, seed: int = 0):
        bank = sub_rng(seed, "memory.bank").standard_normal((rows, dim))
        self.bank = Parameter(bank / np.linalg.norm(bank, axis=1, keepdims=True))

    def set(self, bank: np.ndarray) -> None:
        bank = np.asarray(bank, dtype=np.float64)
        if bank.ndim != 2 or bank.shape[1] != self.bank.shape[1]:
            raise ValueError(f"memory bank shape {bank.shape} incompatible with width {self.bank.shape[1]}")
        self.bank = Parameter(bank)


# ---------------------------------------------------------------------------
# full model


@dataclass
class Posteriors:
    Y: Tensor  # (..., N, T_chunk) in [0, 1]
    logits: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def array(self) -> np.ndarray:
        return self.Y.data


class DiarizationModel(Module):
    FROZEN = ("memory.bank",)

    def __init__(self, cfg: ModelConfig):
        self._cfg = cfg
        self.frontend = ConvFrontend(cfg.n_mels, cfg.conv_channels, cfg.d_model, cfg.seed)
        self.encoder = Encoder(cfg)
        self.dim = DimStack(cfg.d_model, cfg.d_memory, cfg.dim_blocks, cfg.seed)
        self.memory = MemoryStore(cfg.memory_rows, cfg.d_memory, cfg.seed)
        self.decoder = Decoder(cfg)
        self.output = OutputLayer(cfg.d_model, cfg.t_chunk, cfg.seed)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def trainable_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n not in self.FROZEN]

    def encode(self, X) -> tuple[Tensor, Tensor, np.ndarray]:
        X = ops.as_tensor(X)
        with _tag("frontend"):
            F1 = self.frontend(X)
        pe = sinusoidal_pe(X.shape[-2], self._cfg.d_model)
        with _tag("encoder"):
            E_enc = self.encoder(ops.add(F1, pe))
        return F1, E_enc, pe

    def forward(self, X, mask, ivec, rng: np.random.Generator | None = None) -> Posteriors:
        cfg = self._cfg
        X = ops.as_tensor(X)
        mask = np.asarray(mask, dtype=np.float64)
        ivec = np.asarray(ivec.data if isinstance(ivec, Tensor) else ivec, dtype=np.float64)
        squeeze = X.ndim == 2
        if squeeze:
            X = ops.reshape(X, (1, *X.shape))
            mask, ivec = mask[None], ivec[None]
        if X.shape[-2] != cfg.t_chunk:
            raise NumericsError(f"chunk has {X.shape[-2]} frames, model expects {cfg.t_chunk}")
        if mask.shape[-2] != cfg.n_speakers or ivec.shape[-2] != cfg.n_speakers:
            raise NumericsError(f"model holds {cfg.n_speakers} speakers; pad mask and ivecs to that count")
        F1, E_enc, pe = self.encode(X)
        with _tag("mamse"):
            F_S, empty = select_speaker_features(F1, mask)
            emb = self.dim(F_S, self.memory.bank, empty)
            E_A = aggregate_embedding(emb.E_M, ivec, cfg.d_model)
        E_dec = self.decoder(E_A, E_enc, pe, rng)
        with _tag("output"):
            logits = self.output.logits(E_dec)
            Y = ops.sigmoid(logits)
        extras = {"empty": empty, "E_A": E_A.data}
        if squeeze:
            Y = ops.reshape(Y, Y.shape[1:])
            logits = ops.reshape(logits, logits.shape[1:])
            extras = {k: v[0] for k, v in extras.items()}
        return Posteriors(Y, logits, extras)


def build_model(cfg: ModelConfig) -> DiarizationModel:
    return DiarizationModel(cfg)


def model_forward(chunk, mask, ivecs, model: DiarizationModel) -> Posteriors:
    """Inference-mode forward on a single chunk (FeatureChunk or T x F array)."""
    X = getattr(chunk, "matrix", chunk)
    was = model.training
    model.eval()
    try:
        return model(X, getattr(mask, "matrix", mask), ivecs)
    finally:
        model.train(was)
