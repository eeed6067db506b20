"""RTTM I/O and frame-grid DER / JER scoring.

Scoring runs on a 1 ms grid. The collar removes ``±collar`` seconds around
every reference segment boundary from the scored region. Reference and
hypothesis speakers are paired by a maximum-overlap assignment, which is
also the DER-optimal mapping because miss and false alarm do not depend on
it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment


class Segment(NamedTuple):
    speaker: str
    onset: float
    duration: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration


SegmentSet = dict[str, list[Segment]]


class RttmError(ValueError):
    pass


def parse_rttm(text: str) -> SegmentSet:
    out: SegmentSet = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 8 or fields[0] != "SPEAKER":
            raise RttmError(f"line {lineno}: expected 'SPEAKER <file> 1 <onset> <dur> <NA> <NA> <spk> ...'")
        try:
            onset, dur = float(fields[3]), float(fields[4])
        except ValueError as exc:
            raise RttmError(f"line {lineno}: bad onset/duration") from exc
        if onset < 0 or dur <= 0:
            raise RttmError(f"line {lineno}: onset must be >= 0 and duration > 0")
        out.setdefault(fields[1], []).append(Segment(fields[7], onset, dur))
    return out


def write_rttm(segments: SegmentSet) -> str:
    lines = []
    for rec in sorted(segments):
        for s in sorted(segments[rec], key=lambda s: (s.onset, s.speaker)):
            lines.append(f"SPEAKER {rec} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker} <NA> <NA>")
    return "\n".join(lines) + ("\n" if lines else "")


def segments_from_activity(
    activity: np.ndarray,
    hop: float,
    speakers: Iterable[str],
    offset: float = 0.0,
) -> list[Segment]:
    """Turn an N x T binary matrix into contiguous per-speaker segments."""
    act = np.asarray(activity).astype(bool)
    segs = []
    for row, spk in zip(act, speakers):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        for a, b in zip(edges[::2], edges[1::2]):
            segs.append(Segment(spk, round(offset + a * hop, 6), round((b - a) * hop, 6)))
    segs.sort(key=lambda s: (s.onset, s.speaker))
    return segs


# ---------------------------------------------------------------------------
# frame grid


def _to_grid(segs: list[Segment], step: float, n: int) -> tuple[list[str], np.ndarray]:
    speakers = sorted({s.speaker for s in segs})
    index = {spk: i for i, spk in enumerate(speakers)}
    grid = np.zeros((len(speakers), n), dtype=bool)
    for s in segs:
        a = int(round(s.onset / step))
        b = int(round(s.offset / step))
        grid[index[s.speaker], a:b] = True
    return speakers, grid


def _scored_mask(ref: list[Segment], collar: float, step: float, n: int) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    if collar <= 0:
        return mask
    for s in ref:
        for b in (s.onset, s.offset):
            lo = max(0, int(round((b - collar) / step)))
            hi = min(n, int(round((b + collar) / step)))
            mask[lo:hi] = False
    return mask


def _grid_length(ref: list[Segment], hyp: list[Segment], step: float) -> int:
    end = max([s.offset for s in ref] + [s.offset for s in hyp] + [0.0])
    return int(math.ceil(end / step)) + 1


@dataclass
class RecordingGrid:
    ref_speakers: list[str]
    hyp_speakers: list[str]
    ref: np.ndarray  # (Nr, G) bool, already restricted to scored frames
    hyp: np.ndarray  # (Nh, G) bool
    step: float


def build_grid(ref: list[Segment], hyp: list[Segment], collar: float = 0.0, step: float = 0.001) -> RecordingGrid:
    n = _grid_length(ref, hyp, step)
    rs, rg = _to_grid(ref, step, n)
    hs, hg = _to_grid(hyp, step, n)
    keep = _scored_mask(ref, collar, step, n)
    return RecordingGrid(rs, hs, rg[:, keep], hg[:, keep], step)


def optimal_mapping(grid: RecordingGrid) -> dict[int, int]:
    """ref index -> hyp index maximising total co-activity."""
    if not grid.ref_speakers or not grid.hyp_speakers:
        return {}
    overlap = grid.ref.astype(np.float64) @ grid.hyp.T.astype(np.float64)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def frame_errors(grid: RecordingGrid, mapping: dict[int, int]) -> tuple[float, float, float, float]:
    """(miss, false alarm, confusion, reference speech) in seconds."""
    n_ref = grid.ref.sum(axis=0).astype(np.int64)
    n_hyp = grid.hyp.sum(axis=0).astype(np.int64)
    correct = np.zeros_like(n_ref)
    for r, h in mapping.items():
        correct += grid.ref[r] & grid.hyp[h]
    miss = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    st = grid.step
    return miss * st, fa * st, conf * st, n_ref.sum() * st


def _pct(x: float, total: float) -> float:
    if total > 0:
        return 100.0 * x / total
    return 0.0 if x == 0 else math.inf


@dataclass
class DerReport:
    fa: float
    miss: float
    spkerr: float
    der: float
    total_ref: float
    collar: float
    per_recording: dict[str, dict[str, float]] = field(default_factory=dict)

    def table(self) -> str:
        head = f"{'recording':<24}{'ref_s':>10}{'MISS%':>9}{'FA%':>9}{'SPKERR%':>9}{'DER%':>9}"
        rows = [head, "-" * len(head)]
        for rec, r in sorted(self.per_recording.items()):
            rows.append(f"{rec:<24}{r['total_ref']:>10.2f}{r['miss']:>9.2f}{r['fa']:>9.2f}{r['spkerr']:>9.2f}{r['der']:>9.2f}")
        rows.append("-" * len(head))
        rows.append(f"{'OVERALL':<24}{self.total_ref:>10.2f}{self.miss:>9.2f}{self.fa:>9.2f}{self.spkerr:>9.2f}{self.der:>9.2f}")
        rows.append(f"collar = {self.collar:.3f} s")
        return "\n".join(rows)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recording", "total_ref", "miss", "fa", "spkerr", "der"])
        for rec, r in sorted(self.per_recording.items()):
            w.writerow([rec] + [f"{r[k]:.4f}" for k in ("total_ref", "miss", "fa", "spkerr", "der")])
        w.writerow(["OVERALL"] + [f"{v:.4f}" for v in (self.total_ref, self.miss, self.fa, self.spkerr, self.der)])
        return buf.getvalue()


def _check_recordings(ref: SegmentSet, hyp: SegmentSet) -> list[str]:
    extra = sorted(set(hyp) - set(ref))
    if extra:
        raise ValueError(f"hypothesis recordings missing from reference: {extra}")
    return sorted(ref)


def compute_der(ref: SegmentSet, hyp: SegmentSet, collar: float = 0.0, step: float = 0.001) -> DerReport:
    """DER with optimal speaker mapping; recordings absent from ``hyp`` score as empty."""
    totals = np.zeros(4)
    per = {}
    for rec in _check_recordings(ref, hyp):
        grid = build_grid(ref[rec], hyp.get(rec, []), collar, step)
        miss, fa, conf, tot = frame_errors(grid, optimal_mapping(grid))
        totals += (miss, fa, conf, tot)
        per[rec] = {
            "total_ref": tot,
            "miss": _pct(miss, tot),
            "fa": _pct(fa, tot),
            "spkerr": _pct(conf, tot),
            "der": _pct(miss + fa + conf, tot),
        }
    miss, fa, conf, tot = totals
    return DerReport(
        fa=_pct(fa, tot),
        miss=_pct(miss, tot),
        spkerr=_pct(conf, tot),
        der=_pct(miss + fa + conf, tot),
        total_ref=float(tot),
        collar=collar,
        per_recording=per,
    )


def compute_jer(ref: SegmentSet, hyp: SegmentSet, collar: float = 0.0, step: float = 0.001) -> float:
    """Mean per-reference-speaker Jaccard error (percent) under the DER mapping."""
    scores = []
    for rec in _check_recordings(ref, hyp):
        grid = build_grid(ref[rec], hyp.get(rec, []), collar, step)
        mapping = optimal_mapping(grid)
        for r in range(len(grid.ref_speakers)):
            if r not in mapping:
                scores.append(1.0)
                continue
            a, b = grid.ref[r], grid.hyp[mapping[r]]
            union = (a | b).sum()
            scores.append(0.0 if union == 0 else 1.0 - (a & b).sum() / union)
    return 100.0 * float(np.mean(scores)) if scores else 0.0
