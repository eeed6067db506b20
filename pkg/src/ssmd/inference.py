"""Whole-recording inference: overlapped chunking, posterior averaging, thresholding, smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DiarizationModel
from .numerics import no_grad
from .scoring import Segment, segments_from_activity, write_rttm
from .training import Batch, make_chunks


@dataclass
class DiarizationResult:
    recording: str
    posteriors: np.ndarray  # N x T averaged posteriors
    activity: np.ndarray  # N x T binary after threshold and median filter
    speakers: list[str]
    hop: float = 0.010

    def segments(self) -> list[Segment]:
        return segments_from_activity(self.activity, self.hop, self.speakers)

    def rttm(self) -> str:
        return write_rttm({self.recording: self.segments()})


def median_smooth(activity: np.ndarray, width: int = 11) -> np.ndarray:
    """Running median along time with edge replication; ``width`` must be odd."""
    if width <= 1:
        return activity.copy()
    if width % 2 == 0:
        raise ValueError("median filter width must be odd")
    half = width // 2
    padded = np.pad(activity, ((0, 0), (half, half)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)
    return np.median(windows, axis=-1)


def stitch(preds: list[np.ndarray], starts: list[int], n_frames: int) -> np.ndarray:
    """Average chunk posteriors wherever chunks overlap; padded tail frames are dropped."""
    N = preds[0].shape[0]
    acc = np.zeros((N, n_frames))
    cnt = np.zeros(n_frames)
    for p, s in zip(preds, starts):
        e = min(s + p.shape[1], n_frames)
        acc[:, s:e] += p[:, : e - s]
        cnt[s:e] += 1
    return acc / np.maximum(cnt, 1)


def infer_recording(model: DiarizationModel, features: np.ndarray, mask: np.ndarray, ivecs: np.ndarray,
                    recording: str = "rec", speakers: list[str] | None = None, threshold: float = 0.5,
                    median_width: int = 11, batch_size: int = 32, hop: float = 0.010) -> DiarizationResult:
    cfg = model.config
    n_real = mask.shape[0]
    chunks = make_chunks(features, mask, ivecs, None, cfg, shift=max(1, cfg.t_chunk // 2), source=recording)
    preds = []
    was = model.training
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(chunks), batch_size):
                b = Batch.stack(chunks[i:i + batch_size])
                preds.extend(model(b.features, b.mask, b.ivec).Y.data)
    finally:
        model.train(was)
    post = stitch(preds, [c.start for c in chunks], features.shape[0])[:n_real]
    act = median_smooth((post > threshold).astype(np.float64), median_width)
    return DiarizationResult(recording, post, act, speakers or [f"spk{i}" for i in range(n_real)], hop)


def frame_accuracy(activity: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of (speaker, frame) cells whose binary decision matches the reference."""
    return float(((activity > 0.5) == (labels > 0.5)).mean())
