"""Desk-scale pipeline glue shared by the command line and the experiment tests."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .convsim import SimConfig, SimulatedConversation, simulate_corpus
from .inference import DiarizationResult, frame_accuracy, infer_recording
from .init_frontend import (
    MemoryBank,
    build_memory,
    cluster_speakers,
    embedding_projection,
    labels_to_mask,
    window_embeddings,
)
from .model import DiarizationModel, ModelConfig, build_model
from .numerics import checkpoint
from .scoring import DerReport, Segment, compute_der
from .training import Chunk, make_chunks

# Desk preset at D=64. A chunk of 64 frames keeps the linear D -> T_chunk
# output head from rank-limiting the per-frame decisions at this width.
DESK_MODEL = dict(d_model=64, d_memory=48, d_ivec=16, t_chunk=64, conv_channels=16, memory_rows=16)
DESK_LR = 3e-4
DESK_SIM = SimConfig(ivec_dim=16)


@dataclass
class Recording:
    id: str
    features: np.ndarray  # T x F
    mask: np.ndarray  # N x T init mask
    ivecs: np.ndarray  # N x D_iv
    labels: np.ndarray | None  # N x T targets aligned with mask rows
    reference: list[Segment]
    speakers: list[str]
    hop: float = 0.010


def mask_ivectors(features: np.ndarray, mask: np.ndarray, dim: int) -> np.ndarray:
    """Unit-norm projected mean of each masked speaker's frames; zero rows for empty masks."""
    P = embedding_projection(features.shape[1], dim)
    out = np.zeros((mask.shape[0], dim))
    for n, row in enumerate(mask):
        if row.sum() == 0:
            continue
        v = (row @ features / row.sum()) @ P
        out[n] = v / max(np.linalg.norm(v), 1e-12)
    return out


def cluster_mask(features: np.ndarray, hop: float = 0.010, n_speakers: int | None = None, seed: int = 0,
                 dim: int = 128) -> np.ndarray:
    """Spectral-clustering init mask for one recording.

    Window embeddings are centred on the recording mean before clustering;
    the raw stand-ins share a large common component that pushes every
    cosine affinity towards 1 and hides the eigengap.
    """
    wins = window_embeddings(features, hop, dim=dim)
    E = np.array([e for _, e in wins])
    E = E - E.mean(axis=0)
    E /= np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
    labels = cluster_speakers(list(E), n_speakers=n_speakers, seed=seed)
    return labels_to_mask(labels, [iv for iv, _ in wins], features.shape[0], hop).matrix


def oracle_recording(sim: SimulatedConversation) -> Recording:
    c = sim.conversation
    return Recording(c.id, sim.features.matrix, sim.labels, sim.ivecs, sim.labels, c.segment_set()[c.id],
                     list(c.speakers), c.hop)


def clustered_recording(sim: SimulatedConversation, n_speakers: int | None = None, seed: int = 0) -> Recording:
    """Init mask from spectral clustering; the stand-in i-vectors are computed from the mask."""
    c = sim.conversation
    mask = cluster_mask(sim.features.matrix, c.hop, n_speakers, seed)
    iv = mask_ivectors(sim.features.matrix, mask, sim.ivecs.shape[1])
    return Recording(c.id, sim.features.matrix, mask, iv, None, c.segment_set()[c.id],
                     [f"{c.id}_c{i}" for i in range(mask.shape[0])], c.hop)


def corpus_memory(sims: Sequence[SimulatedConversation], K: int, dim: int, seed: int = 0,
                  source: str = "synthetic") -> MemoryBank:
    embs = [e for s in sims for _, e in window_embeddings(s.features.matrix, s.conversation.hop, dim=dim)]
    return build_memory(embs, K=K, seed=seed, source=source)


def corpus_chunks(recs: Sequence[Recording], cfg: ModelConfig) -> list[Chunk]:
    chunks: list[Chunk] = []
    for r in recs:
        if r.labels is None:
            raise ValueError(f"{r.id}: training needs frame labels aligned with the mask")
        chunks += make_chunks(r.features, r.mask, r.ivecs, r.labels, cfg, source=r.id)
    return chunks


def diarize(model: DiarizationModel, recs: Sequence[Recording], **kw) -> dict[str, DiarizationResult]:
    return {r.id: infer_recording(model, r.features, r.mask, r.ivecs, r.id, r.speakers, hop=r.hop, **kw)
            for r in recs}


def evaluate(model: DiarizationModel, recs: Sequence[Recording], collar: float = 0.25) -> tuple[DerReport, float]:
    """DER over the corpus and mean frame accuracy where labels are known."""
    results = diarize(model, recs)
    report = compute_der({r.id: r.reference for r in recs}, {k: v.segments() for k, v in results.items()}, collar)
    accs = [frame_accuracy(results[r.id].activity, r.labels) for r in recs if r.labels is not None]
    return report, float(np.mean(accs)) if accs else float("nan")


@dataclass
class DeskSetup:
    model_cfg: ModelConfig
    train: list[Recording]
    memory: MemoryBank


def desk_setup(n_conversations: int = 20, duration: float = 30.0, overlap: float = 0.2, corpus_seed: int = 1,
               memory_seed: int = 99, **model_kw) -> DeskSetup:
    """Synthetic 2-4 speaker corpus with oracle init masks and a memory bank from a disjoint corpus."""
    args = dict(DESK_MODEL)
    args.update(model_kw)
    cfg = ModelConfig(**args)
    sims = simulate_corpus(n_conversations, (2, 4), duration, overlap, seed=corpus_seed, cfg=DESK_SIM)
    mem_sims = simulate_corpus(10, (2, 4), 30.0, overlap, seed=memory_seed, cfg=DESK_SIM, prefix="mem")
    bank = corpus_memory(mem_sims, cfg.memory_rows, cfg.d_memory, seed=0)
    return DeskSetup(cfg, [oracle_recording(s) for s in sims], bank)


def fresh_model(setup: DeskSetup, **overrides) -> DiarizationModel:
    cfg = setup.model_cfg
    if overrides:
        args = cfg.to_dict()
        args.update(overrides)
        cfg = ModelConfig.from_dict(args)
    model = build_model(cfg)
    model.memory.set(setup.memory.bank)
    return model


# ---------------------------------------------------------------------------
# model files: tensors in the checkpoint container, config in a JSON sidecar


def _sidecar(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_model(path: str | Path, model: DiarizationModel, extra: dict | None = None) -> None:
    checkpoint.save(path, model.state_dict())
    meta = {"model": model.config.to_dict(), **(extra or {})}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def load_model(path: str | Path) -> DiarizationModel:
    meta = json.loads(_sidecar(path).read_text())
    model = build_model(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(checkpoint.load(path))
    return model


def save_memory(path: str | Path, bank: MemoryBank) -> None:
    checkpoint.save(path, {"memory.bank": bank.bank})
    meta = {k: v for k, v in bank.meta.items() if k != "objective"}
    meta["final_objective"] = bank.meta["objective"][-1] if bank.meta.get("objective") else None
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_memory(path: str | Path) -> MemoryBank:
    tensors = checkpoint.load(path)
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    return MemoryBank(tensors["memory.bank"], meta)
