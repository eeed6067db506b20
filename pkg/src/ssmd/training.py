"""Loss, optimisation loop, staged fine-tuning and dense-to-MoE parameter transfer."""

from __future__ import annotations

import csv
import fnmatch
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import DiarizationModel, ModelConfig, build_model
from .numerics import AdamState, NumericsError, Tensor, adam_step, ops

log = logging.getLogger(__name__)

MOE_PATTERN = "decoder.L*.ssmoe.*"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-5
    epochs: int = 30
    stage1_epochs: int = 2
    stage2_epochs: int = 2
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.epochs, self.stage1_epochs, self.stage2_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class FreezePlan:
    """Name patterns trainable in stage 1; stage 2 trains everything."""

    stage1: tuple[str, ...] = (MOE_PATTERN,)

    def stage1_names(self, names: Iterable[str]) -> list[str]:
        return [n for n in names if any(fnmatch.fnmatchcase(n, p) for p in self.stage1)]


# ---------------------------------------------------------------------------
# data


@dataclass
class Chunk:
    features: np.ndarray  # T x F
    mask: np.ndarray  # N x T
    ivec: np.ndarray  # N x D_iv
    labels: np.ndarray  # N x T
    source: str = ""
    start: int = 0


def pad_speakers(arr: np.ndarray, n: int) -> np.ndarray:
    if arr.shape[0] > n:
        raise ValueError(f"{arr.shape[0]} speakers exceed model capacity {n}")
    out = np.zeros((n, *arr.shape[1:]))
    out[: arr.shape[0]] = arr
    return out


def make_chunks(features: np.ndarray, mask: np.ndarray, ivecs: np.ndarray, labels: np.ndarray | None,
                cfg: ModelConfig, shift: int | None = None, source: str = "") -> list[Chunk]:
    """Cut a recording into ``t_chunk`` windows; the tail window is zero-padded."""
    T = features.shape[0]
    L = cfg.t_chunk
    shift = L if shift is None else shift
    mask = pad_speakers(mask, cfg.n_speakers)
    ivecs = pad_speakers(ivecs, cfg.n_speakers)
    labels = pad_speakers(labels, cfg.n_speakers) if labels is not None else np.zeros_like(mask)
    starts = list(range(0, max(T - L, 0) + 1, shift))
    if starts[-1] + L < T:
        starts.append(starts[-1] + shift)
    out = []
    for s in starts:
        e = min(s + L, T)
        f = np.zeros((L, features.shape[1]))
        m = np.zeros((cfg.n_speakers, L))
        y = np.zeros((cfg.n_speakers, L))
        f[: e - s] = features[s:e]
        m[:, : e - s] = mask[:, s:e]
        y[:, : e - s] = labels[:, s:e]
        out.append(Chunk(f, m, ivecs.copy(), y, source, s))
    return out


@dataclass
class Batch:
    features: np.ndarray  # B x T x F
    mask: np.ndarray  # B x N x T
    ivec: np.ndarray  # B x N x D_iv
    labels: np.ndarray  # B x N x T

    @classmethod
    def stack(cls, chunks: Sequence[Chunk]) -> "Batch":
        return cls(
            np.stack([c.features for c in chunks]),
            np.stack([c.mask for c in chunks]),
            np.stack([c.ivec for c in chunks]),
            np.stack([c.labels for c in chunks]),
        )


def iterate_batches(chunks: Sequence[Chunk], batch_size: int, rng: np.random.Generator) -> Iterable[Batch]:
    order = rng.permutation(len(chunks))
    for i in range(0, len(order), batch_size):
        yield Batch.stack([chunks[j] for j in order[i:i + batch_size]])


# ---------------------------------------------------------------------------
# loss and steps


def bce_loss(Y: Tensor, labels, floor: float = 1e-7) -> Tensor:
    """Mean frame-wise binary cross-entropy with probabilities clamped to [floor, 1 - floor]."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != Y.shape:
        raise ValueError(f"posterior shape {Y.shape} != label shape {y.shape}")
    p = ops.clip(Y, floor, 1.0 - floor)
    ll = ops.add(ops.mul(ops.log(p), y), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - y))
    return ops.neg(ops.mean(ll))


def training_step(model: DiarizationModel, batch: Batch, state: AdamState, trainable: Sequence[str],
                  rng: np.random.Generator | None = None) -> float:
    """One forward/backward/Adam update restricted to ``trainable`` names; returns the loss."""
    params = dict(model.named_parameters())
    model.zero_grad()
    try:
        post = model(batch.features, batch.mask, batch.ivec, rng)
        loss = bce_loss(post.Y, batch.labels)
    except NumericsError as exc:
        raise TrainingError(f"forward failed at step {state.step + 1}: {exc}") from exc
    value = float(loss.item())
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step + 1}")
    if not trainable:
        return value
    loss.backward()
    adam_step({n: params[n] for n in trainable}, state)
    return value


@dataclass
class LossCurve:
    rows: list[tuple[int, int, float]] = field(default_factory=list)  # (step, stage, loss)

    def add(self, step: int, stage: int, loss: float) -> None:
        self.rows.append((step, stage, loss))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def stage_boundaries(self) -> list[int]:
        """Steps at which a new stage begins."""
        return [b[0] for a, b in zip(self.rows, self.rows[1:]) if b[1] != a[1]]

    def smoothed(self, window: int = 10) -> np.ndarray:
        x = self.losses
        if len(x) == 0:
            return x
        c = np.cumsum(np.insert(x, 0, 0.0))
        out = np.empty_like(x)
        for i in range(len(x)):
            lo = max(0, i + 1 - window)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "stage", "loss"])
        for s, st, l in self.rows:
            w.writerow([s, st, f"{l:.8f}"])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "LossCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([(int(r["step"]), int(r["stage"]), float(r["loss"])) for r in rows])


def train(model: DiarizationModel, chunks: Sequence[Chunk], epochs: int, lr: float, batch_size: int = 16,
          seed: int = 0, trainable: Sequence[str] | None = None, curve: LossCurve | None = None,
          stage: int = 0, state: AdamState | None = None, max_steps: int | None = None) -> tuple[LossCurve, AdamState]:
    """Plain Adam loop. Curve steps continue from the last row of ``curve``."""
    curve = curve if curve is not None else LossCurve()
    state = state if state is not None else AdamState(lr=lr)
    state.lr = lr
    trainable = model.trainable_names() if trainable is None else list(trainable)
    data_rng = np.random.default_rng([seed, 1, stage])
    drop_rng = np.random.default_rng([seed, 2, stage])
    base = curve.rows[-1][0] if curve.rows else 0
    done = 0
    model.train()
    for ep in range(epochs):
        for batch in iterate_batches(chunks, batch_size, data_rng):
            if max_steps is not None and done >= max_steps:
                return curve, state
            loss = training_step(model, batch, state, trainable, drop_rng)
            done += 1
            curve.add(base + done, stage, loss)
        log.info("stage %d epoch %d loss %.4f", stage, ep + 1, curve.rows[-1][2] if curve.rows else float("nan"))
    return curve, state


def staged_finetune(model: DiarizationModel, chunks: Sequence[Chunk], cfg: TrainConfig, plan: FreezePlan = FreezePlan(),
                    curve: LossCurve | None = None, lr: float | None = None) -> LossCurve:
    """Stage 1 trains only the SS-MoE layers; stage 2 trains everything at the same rate."""
    if not model.config.ssmoe_layers:
        raise TrainingError("staged fine-tuning needs at least one SS-MoE layer")
    names = model.trainable_names()
    stage1 = plan.stage1_names(names)
    if not stage1:
        raise TrainingError("stage-1 trainable set is empty")
    lr = cfg.lr_finetune if lr is None else lr
    curve, state = train(model, chunks, cfg.stage1_epochs, lr, cfg.batch_size, cfg.seed, stage1, curve, stage=1)
    # stage 2 keeps the moments of the SS-MoE tensors and starts fresh ones for the rest
    curve, _ = train(model, chunks, cfg.stage2_epochs, lr, cfg.batch_size, cfg.seed, names, curve, stage=2, state=state)
    return curve


# ---------------------------------------------------------------------------
# parameter transfer

_MOE_NAME = re.compile(r"^decoder\.L(\d+)\.ssmoe\.(.+)$")


def transfer_parameters(pretrained: dict[str, np.ndarray], target: ModelConfig) -> dict[str, np.ndarray]:
    """Initialise an SS-MoE model from a dense checkpoint.

    Shared tensors are copied verbatim. In each SS-MoE layer the dense
    feed-forward initialises the shared expert and every collaborative
    expert; the slot matrix and combine module keep the target's seeded
    Xavier initialisation, so the result depends only on the inputs.
    """
    fresh = build_model(target).state_dict()
    out: dict[str, np.ndarray] = {}
    for name, init in fresh.items():
        m = _MOE_NAME.match(name)
        source = name
        if m:
            layer, rest = m.groups()
            head, _, tail = rest.partition(".")
            if head == "shared" or re.fullmatch(r"expert\d+", head):
                source = f"decoder.L{layer}.ffn.{tail}"
            else:
                out[name] = init.copy()
                continue
        if source not in pretrained:
            raise KeyError(f"pretrained checkpoint lacks {source!r} (needed for {name!r})")
        value = np.asarray(pretrained[source], dtype=np.float64)
        if value.shape != init.shape:
            raise ValueError(f"{source}: pretrained shape {value.shape} != target {init.shape}")
        out[name] = value.copy()
    return out


def transfer_model(pretrained: DiarizationModel, target: ModelConfig) -> DiarizationModel:
    model = build_model(target)
    model.memory.set(pretrained.memory.bank.data)
    model.load_state_dict(transfer_parameters(pretrained.state_dict(), target))
    return model
