"""Log-Mel filterbank front-end."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import checkpoint


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    frame_length: float = 0.025
    frame_hop: float = 0.010
    n_fft: int = 512
    n_mels: int = 40
    f_min: float = 20.0
    f_max: float | None = None
    log_floor: float = 1e-10
    cmn: bool = False

    def __post_init__(self):
        f_max = self.sample_rate / 2 if self.f_max is None else self.f_max
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.f_min < f_max <= self.sample_rate / 2):
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.frame_hop > self.frame_length:
            raise ValueError("frame hop must not exceed frame length")
        if self.win_samples > self.n_fft:
            raise ValueError("n_fft must cover one frame")

    @property
    def upper(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max

    @property
    def win_samples(self) -> int:
        return int(round(self.frame_length * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.frame_hop * self.sample_rate))


@dataclass
class FeatureChunk:
    """T x F feature matrix with its framing metadata."""

    matrix: np.ndarray
    hop: float = 0.010
    start_frame: int = 0
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("feature matrix must be T x F")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("features must be finite")

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FbankConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper), cfg.n_mels + 2))
    return pts[1:-1]


def build_mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular mel filters, ``n_mels x (n_fft // 2 + 1)``, each peak-normalised to 1."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    bank = np.clip(np.minimum(rising, falling), 0.0, None)
    peak = bank.max(axis=1)
    if np.any(peak <= 0):
        bad = int(np.argmin(peak))
        raise ValueError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: filter {bad} covers no FFT bin"
        )
    return bank / peak[:, None]


def frame_count(n_samples: int, cfg: FbankConfig) -> int:
    return 1 + (n_samples - cfg.win_samples) // cfg.hop_samples


def compute_fbank(wave_: np.ndarray, cfg: FbankConfig = FbankConfig(), source_id: str = "") -> FeatureChunk:
    x = np.asarray(wave_, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty waveform")
    if x.size < cfg.win_samples:
        raise ValueError(f"waveform shorter than one frame ({x.size} < {cfg.win_samples} samples)")
    n = frame_count(x.size, cfg)
    starts = np.arange(n) * cfg.hop_samples
    frames = x[starts[:, None] + np.arange(cfg.win_samples)[None, :]]
    frames = frames * np.hanning(cfg.win_samples)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ build_mel_filterbank(cfg).T
    feats = np.log(np.maximum(mel, cfg.log_floor))
    if cfg.cmn:
        feats = feats - feats.mean(axis=0, keepdims=True)
    return FeatureChunk(feats, hop=cfg.frame_hop, source_id=source_id)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError("only mono WAV input is supported")
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV input is supported")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def dump_features(path: str | Path, chunks: dict[str, FeatureChunk]) -> None:
    """One container record per chunk, keyed by chunk name."""
    checkpoint.save(path, {name: c.matrix for name, c in chunks.items()})


def load_features(path: str | Path, hop: float = 0.010) -> dict[str, FeatureChunk]:
    return {k: FeatureChunk(v, hop=hop, source_id=k) for k, v in checkpoint.load(path).items()}
