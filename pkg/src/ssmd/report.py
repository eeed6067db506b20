"""Self-contained SVG line plots for loss curves and DER-vs-setting tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=160, top=40, bottom=55)


class ReportError(ValueError):
    pass


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    boundaries: list[float] = field(default_factory=list)  # x positions of stage changes
    ticks: list[str] | None = None  # categorical x labels


def read_series(text: str, label: str) -> Series:
    """Parse a (step, loss[, stage]) curve or a (setting, DER) table."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ReportError(f"{label}: no data rows")
    cols = {c.strip().lower(): c for c in rows[0].keys() if c is not None}
    try:
        if "step" in cols and "loss" in cols:
            x = np.array([float(r[cols["step"]]) for r in rows])
            y = np.array([float(r[cols["loss"]]) for r in rows])
            bounds = []
            if "stage" in cols:
                st = [r[cols["stage"]] for r in rows]
                bounds = [float(x[i]) for i in range(1, len(st)) if st[i] != st[i - 1]]
            return Series(label, x, y, bounds)
        if "setting" in cols and "der" in cols:
            ticks = [r[cols["setting"]] for r in rows]
            y = np.array([float(r[cols["der"]]) for r in rows])
            return Series(label, np.arange(len(rows), dtype=float), y, ticks=ticks)
    except (TypeError, ValueError) as exc:
        raise ReportError(f"{label}: malformed value ({exc})") from exc
    raise ReportError(f"{label}: expected columns (step, loss) or (setting, DER), got {list(rows[0].keys())}")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + step * 1e-9, step)]


def svg_plot(series: Sequence[Series], title: str = "", xlabel: str = "step", ylabel: str = "loss") -> str:
    if not series:
        raise ReportError("nothing to plot")
    xs = np.concatenate([s.x for s in series])
    ys = np.concatenate([s.y for s in series])
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ReportError("non-finite values in plot data")
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        pad = abs(y0) * 0.1 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (y1 - v) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="24" text-anchor="middle" font-size="15">'
                   f'{escape(title)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.2f})">{escape(ylabel)}</text>')

    ticks = next((s.ticks for s in series if s.ticks), None)
    xt = list(range(len(ticks))) if ticks else _nice_ticks(x0, x1)
    for i, v in enumerate(xt):
        lab = ticks[i] if ticks else f"{v:g}"
        out.append(f'<line x1="{_fmt(px(v))}" y1="{MARGIN["top"] + ph}" x2="{_fmt(px(v))}" '
                   f'y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(v))}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{escape(lab)}</text>')
    for v in _nice_ticks(y0, y1):
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{_fmt(py(v))}" x2="{MARGIN["left"]}" '
                   f'y2="{_fmt(py(v))}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(py(v) + 4)}" text-anchor="end" '
                   f'font-size="11">{v:g}</text>')

    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        for b in s.boundaries:
            out.append(f'<line class="stage-marker" x1="{_fmt(px(b))}" y1="{MARGIN["top"]}" x2="{_fmt(px(b))}" '
                       f'y2="{MARGIN["top"] + ph}" stroke="{color}" stroke-dasharray="4 3"/>')
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(s.x, s.y))
        if len(s.x) == 1:
            out.append(f'<circle class="marker" cx="{_fmt(px(s.x[0]))}" cy="{_fmt(py(s.y[0]))}" r="4" '
                       f'fill="{color}"/>')
        else:
            out.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN["top"] + 14 + 18 * k
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{lx + 24}" y="{ly}" font-size="12">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_curves(paths: Sequence[str | Path], out: str | Path | None = None, labels: Sequence[str] | None = None,
                  title: str = "") -> str:
    """Overlay every CSV in ``paths`` on one SVG; writes to ``out`` when given."""
    labels = list(labels) if labels else [Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise ReportError("one label per CSV is required")
    series = [read_series(Path(p).read_text(), lab) for p, lab in zip(paths, labels)]
    tabular = any(s.ticks for s in series)
    svg = svg_plot(series, title, xlabel="setting" if tabular else "step", ylabel="DER (%)" if tabular else "loss")
    if out is not None:
        Path(out).write_text(svg)
    return svg
