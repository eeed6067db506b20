"""Clustering-based initialisation: speaker masks, stand-in embeddings, memory bank.

Window embeddings are mean-pooled features pushed through a fixed random
projection and unit-normalised; they stand in for x-vectors, and are only
required to be discriminative.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_MEMORY_DIM = 384
DEFAULT_MEMORY_ROWS = 64
_EMB_SALT = 0xEC4


@dataclass
class SpeakerMask:
    matrix: np.ndarray  # N x T, {0, 1}
    speakers: list[str]
    hop: float = 0.010

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError("mask must be N x T with N >= 1")
        if not np.isin(self.matrix, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class MemoryBank:
    bank: np.ndarray  # K x D_M, unit rows
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.bank.shape[0]

    @property
    def dim(self) -> int:
        return self.bank.shape[1]


# ---------------------------------------------------------------------------
# window embeddings


@lru_cache(maxsize=16)
def embedding_projection(n_features: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([_EMB_SALT, n_features, dim])
    return rng.standard_normal((n_features, dim)) / np.sqrt(n_features)


def window_intervals(n_frames: int, hop: float, window: float = 1.5, shift: float = 0.75) -> list[tuple[float, float]]:
    duration = n_frames * hop
    if duration + 1e-9 < window:
        raise ValueError(f"input of {duration:.3f} s is shorter than one {window} s window")
    n = 1 + int(np.floor((duration - window) / shift + 1e-9))
    return [(round(i * shift, 6), round(i * shift + window, 6)) for i in range(n)]


def window_embeddings(
    features: np.ndarray,
    hop: float = 0.010,
    window: float = 1.5,
    shift: float = 0.75,
    dim: int = DEFAULT_MEMORY_DIM,
) -> list[tuple[tuple[float, float], np.ndarray]]:
    feats = np.asarray(features, dtype=np.float64)
    proj = embedding_projection(feats.shape[1], dim)
    out = []
    for a, b in window_intervals(feats.shape[0], hop, window, shift):
        seg = feats[int(round(a / hop)):int(round(b / hop))]
        v = seg.mean(axis=0) @ proj
        norm = np.linalg.norm(v)
        out.append(((a, b), v / norm if norm > 0 else v))
    return out


def window_energy(features: np.ndarray, intervals, hop: float = 0.010) -> np.ndarray:
    """Norm of each window's mean feature vector; a crude speech detector."""
    feats = np.asarray(features)
    return np.array([np.linalg.norm(feats[int(round(a / hop)):int(round(b / hop))].mean(axis=0)) for a, b in intervals])


# ---------------------------------------------------------------------------
# k-means and spectral clustering


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    history: list[float]


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
    return np.array(centers)


def kmeans(X: np.ndarray, k: int, seed: int = 0, n_init: int = 5, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; keeps the best of ``n_init`` runs.

    An emptied cluster keeps its previous centre, so the objective never rises.
    """
    X = np.asarray(X, dtype=np.float64)
    if k > len(X):
        raise ValueError(f"K={k} exceeds the {len(X)} available samples")
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_init):
        C = _kmeans_pp(X, k, rng)
        history = []
        labels = None
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
            new = d2.argmin(axis=1)
            history.append(float(d2[np.arange(len(X)), new].sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    C[j] = members.mean(axis=0)
        final = float(((X - C[labels]) ** 2).sum())
        history.append(final)
        if best is None or final < best.history[-1]:
            best = KMeansResult(C.copy(), labels.copy(), history)
    return best


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered in order of first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def cosine_affinity(emb: np.ndarray) -> np.ndarray:
    X = np.asarray(emb, dtype=np.float64)
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    A = np.clip(X @ X.T, 0.0, 1.0)
    np.fill_diagonal(A, 0.0)
    return A


def cluster_speakers(
    embeddings,
    n_speakers: int | None = None,
    max_speakers: int = 8,
    seed: int = 0,
) -> np.ndarray:
    """Spectral clustering on the cosine affinity (unnormalised Laplacian).

    ``n_speakers=None`` estimates the count from the largest eigengap.
    """
    X = np.asarray([e for e in embeddings], dtype=np.float64)
    if len(X) < 2:
        raise ValueError("need at least two windows to cluster")
    if n_speakers == 1:
        return np.zeros(len(X), dtype=int)
    A = cosine_affinity(X)
    off = A[~np.eye(len(X), dtype=bool)]
    if np.all(off > 1.0 - 1e-9):
        warnings.warn("degenerate affinity (identical embeddings); returning one cluster", RuntimeWarning)
        return np.zeros(len(X), dtype=int)
    L = np.diag(A.sum(axis=1)) - A
    evals, evecs = np.linalg.eigh(L)
    if n_speakers is None:
        top = min(max_speakers, len(X) - 1)
        gaps = np.diff(evals[: top + 1])
        n_speakers = int(np.argmax(gaps)) + 1
        log.debug("eigengap estimate: %d speakers", n_speakers)
    if n_speakers == 1:
        return np.zeros(len(X), dtype=int)
    n_speakers = min(n_speakers, len(X))
    U = evecs[:, :n_speakers]
    return _canonical(kmeans(U, n_speakers, seed=seed, n_init=10).labels)


# ---------------------------------------------------------------------------
# masks and memory


def labels_to_mask(
    window_labels,
    intervals,
    n_frames: int,
    hop: float = 0.010,
    n_speakers: int | None = None,
    speakers: list[str] | None = None,
) -> SpeakerMask:
    """Frame-level 0/1 mask from window labels.

    Each frame takes the majority label of the windows covering it; a tie
    goes to the covering window whose centre is closest. Uncovered frames
    stay silent.
    """
    labels = np.asarray(window_labels, dtype=int)
    N = int(n_speakers if n_speakers is not None else labels.max() + 1)
    votes = np.zeros((N, n_frames))
    centre_t = (np.arange(n_frames) + 0.5) * hop
    best_dist = np.full(n_frames, np.inf)
    nearest = np.full(n_frames, -1)
    for lab, (a, b) in zip(labels, intervals):
        lo, hi = int(round(a / hop)), min(n_frames, int(round(b / hop)))
        votes[lab, lo:hi] += 1
        dist = np.abs(centre_t[lo:hi] - 0.5 * (a + b))
        closer = dist < best_dist[lo:hi]
        best_dist[lo:hi][closer] = dist[closer]
        nearest[lo:hi][closer] = lab
    mask = np.zeros((N, n_frames))
    covered = votes.sum(axis=0) > 0
    top = votes.max(axis=0)
    tied = (votes == top).sum(axis=0) > 1
    winner = np.where(tied, nearest, votes.argmax(axis=0))
    cols = np.flatnonzero(covered)
    mask[winner[cols], cols] = 1.0
    return SpeakerMask(mask, speakers or [f"cluster{i}" for i in range(N)], hop)


def build_memory(embeddings, K: int = DEFAULT_MEMORY_ROWS, seed: int = 0, source: str = "synthetic") -> MemoryBank:
    X = np.asarray(embeddings, dtype=np.float64)
    if K > len(X):
        raise ValueError(f"K={K} exceeds the {len(X)} available embeddings")
    res = kmeans(X, K, seed=seed)
    C = res.centers / np.maximum(np.linalg.norm(res.centers, axis=1, keepdims=True), 1e-12)
    return MemoryBank(C, {"source": source, "kmeans_seed": seed, "K": K, "objective": res.history})
