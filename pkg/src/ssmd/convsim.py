"""Parametric multi-speaker conversation simulator.

Turn-taking follows a three-state Markov chain (silence / one speaker /
two overlapping speakers) with shifted-geometric dwell times. The jump
probability into the overlap state is solved from the requested overlap
ratio, and a seeded rejection loop keeps the realised ratio within
tolerance for long recordings.

Overlap ratio here is overlapped speech frames over all speech frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .fbank import FbankConfig, FeatureChunk, compute_fbank
from .numerics import checkpoint
from .scoring import Segment, SegmentSet, segments_from_activity, write_rttm

SILENCE, SINGLE, OVERLAP = 0, 1, 2
_SIG_SALT = 0x5EED5
_PROJ_SALT = 0x9E0


@dataclass(frozen=True)
class SimConfig:
    hop: float = 0.010
    n_features: int = 40
    ivec_dim: int = 128
    mean_silence: float = 0.6
    mean_single: float = 2.0
    mean_overlap: float = 0.8
    min_dwell: float = 0.2
    p_pause: float = 0.25  # single -> silence
    overlap_tolerance: float = 0.05
    max_attempts: int = 400
    base_scale: float = 1.0
    mod_depth: float = 0.3
    frame_jitter: float = 0.15
    noise: float = 0.3
    signature_gap: float = 2.0
    speaker_pool: int = 100_000
    mode: str = "features"  # or "waveform"
    sample_rate: int = 16000


@dataclass(frozen=True)
class SpeakerSignature:
    id: int
    base: np.ndarray
    mod_vector: np.ndarray
    mod_rate: float
    mod_phase: float
    f0: float

    @property
    def label(self) -> str:
        return f"spk{self.id:05d}"


@dataclass
class Conversation:
    id: str
    speakers: list[str]
    segments: dict[str, list[tuple[float, float]]]
    n_speakers: int
    duration: float
    overlap_target: float
    overlap_realized: float
    seed: int
    hop: float = 0.010

    def segment_set(self) -> SegmentSet:
        segs = [Segment(spk, on, round(off - on, 6)) for spk in self.speakers for on, off in self.segments[spk]]
        segs.sort(key=lambda s: (s.onset, s.speaker))
        return {self.id: segs}


@dataclass
class SimulatedConversation:
    conversation: Conversation
    features: FeatureChunk
    labels: np.ndarray  # N x T, {0,1}
    signatures: list[SpeakerSignature]
    ivecs: np.ndarray  # N x ivec_dim

    def rttm(self) -> str:
        return write_rttm(self.conversation.segment_set())


# ---------------------------------------------------------------------------
# speaker signatures


def make_signature(speaker_id: int, cfg: SimConfig = SimConfig()) -> SpeakerSignature:
    rng = np.random.default_rng([_SIG_SALT, speaker_id])
    base = rng.standard_normal(cfg.n_features) * cfg.base_scale
    mod = rng.standard_normal(cfg.n_features)
    mod /= np.linalg.norm(mod)
    return SpeakerSignature(
        id=speaker_id,
        base=base,
        mod_vector=mod,
        mod_rate=float(rng.uniform(0.5, 3.0)),
        mod_phase=float(rng.uniform(0, 2 * np.pi)),
        f0=float(rng.uniform(90.0, 260.0)),
    )


@lru_cache(maxsize=16)
def _embedding_projection(n_features: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([_PROJ_SALT, n_features, dim])
    g = rng.standard_normal((max(dim, n_features), min(dim, n_features)))
    q, _ = np.linalg.qr(g)
    # orthonormal columns when dim >= F (angles preserved), orthonormal rows otherwise
    return q if dim >= n_features else q.T


def signature_embedding(sig: SpeakerSignature, dim: int = 128) -> np.ndarray:
    """Unit-norm stand-in i-vector, a fixed orthogonal projection of the base spectrum."""
    proj = _embedding_projection(sig.base.size, dim)
    v = proj @ sig.base
    return v / np.linalg.norm(v)


def _pick_speakers(rng: np.random.Generator, n: int, cfg: SimConfig) -> list[SpeakerSignature]:
    chosen: list[SpeakerSignature] = []
    while len(chosen) < n:
        sid = int(rng.integers(0, cfg.speaker_pool))
        sig = make_signature(sid, cfg)
        if any(c.id == sid or np.linalg.norm(c.base - sig.base) <= cfg.signature_gap for c in chosen):
            continue
        chosen.append(sig)
    return chosen


# ---------------------------------------------------------------------------
# turn-taking


def _dwell(rng: np.random.Generator, mean: float, cfg: SimConfig) -> int:
    min_f = max(1, int(round(cfg.min_dwell / cfg.hop)))
    mean_f = max(mean / cfg.hop, min_f + 1.0)
    return min_f + int(rng.geometric(1.0 / (mean_f - min_f + 1.0))) - 1


def _overlap_jump(target: float, cfg: SimConfig, n_speakers: int) -> tuple[float, float]:
    """(probability single -> overlap, mean overlap dwell) hitting ``target`` in expectation."""
    if n_speakers < 2 or target <= 0:
        return 0.0, cfg.mean_overlap
    budget = 1.0 - cfg.p_pause - 0.05
    mean_ov = cfg.mean_overlap
    q = target * cfg.mean_single / (mean_ov * (1.0 - target))
    if q > budget:
        mean_ov = target * cfg.mean_single / (budget * (1.0 - target))
        q = budget
    return q, mean_ov


def _activity(n_frames: int, n_speakers: int, target: float, rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    q, mean_ov = _overlap_jump(target, cfg, n_speakers)
    act = np.zeros((n_speakers, n_frames), dtype=bool)
    state = SILENCE if rng.random() < 0.5 else SINGLE
    cur = int(rng.integers(n_speakers))
    other = cur
    t = 0
    while t < n_frames:
        if state == SILENCE:
            d = _dwell(rng, cfg.mean_silence, cfg)
        elif state == SINGLE:
            d = _dwell(rng, cfg.mean_single, cfg)
            act[cur, t:t + d] = True
        else:
            d = _dwell(rng, mean_ov, cfg)
            act[cur, t:t + d] = True
            act[other, t:t + d] = True
        t += d
        # transition
        if state == SILENCE:
            state = SINGLE
            if n_speakers > 1 and rng.random() < 0.5:
                cur = _another(rng, cur, n_speakers)
        elif state == SINGLE:
            u = rng.random()
            if n_speakers == 1 or u < cfg.p_pause:
                state = SILENCE
            elif u < cfg.p_pause + q:
                state = OVERLAP
                other = _another(rng, cur, n_speakers)
            else:
                cur = _another(rng, cur, n_speakers)
        else:
            state = SINGLE
            if rng.random() < 0.5:
                cur = other
    return act


def _another(rng: np.random.Generator, cur: int, n: int) -> int:
    if n == 1:
        return cur
    k = int(rng.integers(n - 1))
    return k if k < cur else k + 1


def overlap_ratio(labels: np.ndarray) -> float:
    counts = np.asarray(labels).sum(axis=0)
    speech = (counts >= 1).sum()
    return float((counts >= 2).sum() / speech) if speech else 0.0


# ---------------------------------------------------------------------------
# rendering


def _render_features(act: np.ndarray, sigs: list[SpeakerSignature], rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    n, T = act.shape
    t = np.arange(T) * cfg.hop
    feats = rng.standard_normal((T, cfg.n_features)) * cfg.noise
    for k, sig in enumerate(sigs):
        on = act[k]
        if not on.any():
            continue
        env = cfg.mod_depth * np.sin(2 * np.pi * sig.mod_rate * t[on] + sig.mod_phase)
        jitter = rng.standard_normal((int(on.sum()), cfg.n_features)) * cfg.frame_jitter
        feats[on] += sig.base + env[:, None] * sig.mod_vector + jitter
    return feats


def _render_waveform(act: np.ndarray, sigs: list[SpeakerSignature], rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    n, T = act.shape
    sr = cfg.sample_rate
    hop_s = int(round(cfg.hop * sr))
    n_samples = T * hop_s
    t = np.arange(n_samples) / sr
    wave = rng.standard_normal(n_samples) * 1e-3
    for k, sig in enumerate(sigs):
        gate = np.repeat(act[k], hop_s).astype(np.float64)
        if not gate.any():
            continue
        src = np.zeros(n_samples)
        for h in range(1, 12):
            f = h * sig.f0
            if f >= sr / 2:
                break
            band = int(np.clip(f / (sr / 2) * (sig.base.size - 1), 0, sig.base.size - 1))
            src += np.exp(0.5 * sig.base[band]) / h * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        wave += 0.02 * gate * src
    return wave


def simulate_conversation(
    n_speakers: int,
    duration: float,
    overlap_target: float,
    seed: int,
    cfg: SimConfig = SimConfig(),
    conv_id: str | None = None,
) -> SimulatedConversation:
    if not 1 <= n_speakers <= 8:
        raise ValueError("n_speakers must lie in [1, 8]")
    if duration < 10:
        raise ValueError("duration must be at least 10 s")
    if overlap_target < 0 or overlap_target > min(n_speakers - 1, 0.95):
        raise ValueError(f"overlap target {overlap_target} infeasible for {n_speakers} speaker(s)")

    rng = np.random.default_rng(seed)
    sigs = _pick_speakers(rng, n_speakers, cfg)
    n_frames = int(round(duration / cfg.hop))

    best, best_gap = None, np.inf
    for _ in range(cfg.max_attempts):
        act = _activity(n_frames, n_speakers, overlap_target, rng, cfg)
        gap = abs(overlap_ratio(act) - overlap_target)
        if not act.any(axis=1).all():
            gap += 1.0  # every speaker must talk at least once
        if gap < best_gap:
            best, best_gap = act, gap
        if gap <= cfg.overlap_tolerance:
            break
    act = best

    if cfg.mode == "waveform":
        wave = _render_waveform(act, sigs, rng, cfg)
        fcfg = FbankConfig(sample_rate=cfg.sample_rate, frame_hop=cfg.hop, n_mels=cfg.n_features)
        feats = compute_fbank(wave, fcfg).matrix
        centers = (np.arange(feats.shape[0]) * fcfg.hop_samples + fcfg.win_samples / 2) / cfg.sample_rate
        idx = np.minimum((centers / cfg.hop).astype(int), n_frames - 1)
        labels = act[:, idx]
    else:
        feats = _render_features(act, sigs, rng, cfg)
        labels = act

    cid = conv_id or f"conv{seed:06d}"
    speakers = [s.label for s in sigs]
    segs = segments_from_activity(labels, cfg.hop, speakers)
    conv = Conversation(
        id=cid,
        speakers=speakers,
        segments={spk: [(s.onset, round(s.onset + s.duration, 6)) for s in segs if s.speaker == spk] for spk in speakers},
        n_speakers=n_speakers,
        duration=labels.shape[1] * cfg.hop,
        overlap_target=overlap_target,
        overlap_realized=overlap_ratio(labels),
        seed=seed,
        hop=cfg.hop,
    )
    ivecs = np.stack([signature_embedding(s, cfg.ivec_dim) for s in sigs])
    chunk = FeatureChunk(feats, hop=cfg.hop, source_id=cid)
    return SimulatedConversation(conv, chunk, labels.astype(np.float64), sigs, ivecs)


def simulate_corpus(
    n_conversations: int,
    speakers: tuple[int, int],
    duration: float,
    overlap_target: float,
    seed: int,
    cfg: SimConfig = SimConfig(),
    prefix: str = "conv",
) -> list[SimulatedConversation]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_conversations):
        n = int(rng.integers(speakers[0], speakers[1] + 1))
        sub = int(rng.integers(2**31))
        out.append(simulate_conversation(n, duration, overlap_target, sub, cfg, conv_id=f"{prefix}{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# persistence


def save_conversation(sim: SimulatedConversation, out_dir: str | Path, domain: str = "synthetic") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = sim.conversation
    feat_path = out / f"{c.id}.ssmd"
    rttm_path = out / f"{c.id}.rttm"
    checkpoint.save(feat_path, {"features": sim.features.matrix, "labels": sim.labels, "ivecs": sim.ivecs})
    rttm_path.write_text(sim.rttm())
    return {
        "id": c.id,
        "n_speakers": c.n_speakers,
        "duration": c.duration,
        "overlap_target": c.overlap_target,
        "overlap_realized": round(c.overlap_realized, 6),
        "seed": c.seed,
        "speakers": c.speakers,
        "hop": c.hop,
        "domain": domain,
        "features": feat_path.name,
        "rttm": rttm_path.name,
    }


def write_manifest(entries: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_conversation(entry: dict, root: str | Path) -> SimulatedConversation:
    """Rebuild a simulated conversation from a manifest line."""
    from .scoring import parse_rttm

    root = Path(root)
    rec = checkpoint.load(root / entry["features"])
    segset = parse_rttm((root / entry["rttm"]).read_text())
    speakers = list(entry["speakers"])
    segs = segset.get(entry["id"], [])
    conv = Conversation(
        id=entry["id"],
        speakers=speakers,
        segments={spk: [(s.onset, round(s.offset, 6)) for s in segs if s.speaker == spk] for spk in speakers},
        n_speakers=entry["n_speakers"],
        duration=entry["duration"],
        overlap_target=entry["overlap_target"],
        overlap_realized=entry["overlap_realized"],
        seed=entry["seed"],
        hop=entry.get("hop", 0.01),
    )
    sigs = [make_signature(int(s[3:])) for s in speakers]
    return SimulatedConversation(conv, FeatureChunk(rec["features"], hop=conv.hop, source_id=conv.id), rec["labels"], sigs, rec["ivecs"])


def config_dict(cfg: SimConfig) -> dict:
    return asdict(cfg)
