"""Minimal static SVG charts: log/linear axes, lines and markers.

Output is plain text with fixed number formatting, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")


@dataclass
class Series:
    x: Sequence[float]
    y: Sequence[float]
    label: str = ""
    kind: str = "line"  # "line" or "points"
    color: Optional[str] = None


@dataclass
class Chart:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    logx: bool = False
    logy: bool = False
    width: int = 640
    height: int = 420
    series: list = field(default_factory=list)

    def add(self, x, y, label: str = "", kind: str = "line", color: Optional[str] = None) -> "Chart":
        self.series.append(Series(list(map(float, x)), list(map(float, y)), label, kind, color))
        return self

    def render(self) -> str:
        return render(self)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, (b - a) // 6)
        return [float(k) for k in range(a, b + 1, step) if lo - 1e-9 <= k <= hi + 1e-9]
    span = hi - lo
    raw = span / 5 if span > 0 else 1.0
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _tick_label(v: float, log: bool) -> str:
    if log:
        return f"1e{int(round(v))}"
    return f"{v:.4g}"


def render(chart: Chart) -> str:
    left, right, top, bottom = 70, 150, 36, 50
    W, H = chart.width, chart.height
    pw, ph = W - left - right, H - top - bottom

    def tr(vals, log):
        a = np.asarray(vals, dtype=float)
        if log:
            with np.errstate(divide="ignore", invalid="ignore"):
                a = np.where(a > 0, np.log10(np.where(a > 0, a, 1.0)), np.nan)
        return a

    xs = [tr(s.x, chart.logx) for s in chart.series]
    ys = [tr(s.y, chart.logy) for s in chart.series]
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    allx, ally = allx[np.isfinite(allx)], ally[np.isfinite(ally)]
    if allx.size == 0:
        allx = np.array([0.0, 1.0])
    if ally.size == 0:
        ally = np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad_y = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad_y, y1 + pad_y

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _ticks(x0, x1, chart.logx):
        out.append(f'<line x1="{_f(px(t))}" y1="{top + ph}" x2="{_f(px(t))}" y2="{top + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{_f(px(t))}" y="{top + ph + 16}" text-anchor="middle">{_tick_label(t, chart.logx)}</text>')
    for t in _ticks(y0, y1, chart.logy):
        out.append(f'<line x1="{left - 4}" y1="{_f(py(t))}" x2="{left}" y2="{_f(py(t))}" stroke="#333"/>')
        out.append(f'<text x="{left - 6}" y="{_f(py(t) + 4)}" text-anchor="end">{_tick_label(t, chart.logy)}</text>')
    if chart.title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="20" text-anchor="middle" font-size="13">{escape(chart.title)}</text>')
    if chart.xlabel:
        out.append(f'<text x="{left + pw / 2:.2f}" y="{H - 10}" text-anchor="middle">{escape(chart.xlabel)}</text>')
    if chart.ylabel:
        cy = top + ph / 2
        out.append(f'<text x="16" y="{cy:.2f}" text-anchor="middle" transform="rotate(-90 16 {cy:.2f})">{escape(chart.ylabel)}</text>')
    for k, (s, sx, sy) in enumerate(zip(chart.series, xs, ys)):
        color = s.color or PALETTE[k % len(PALETTE)]
        ok = np.isfinite(sx) & np.isfinite(sy)
        pts = [(px(a), py(b)) for a, b in zip(sx[ok], sy[ok])]
        if s.kind == "line" and len(pts) > 1:
            path = " ".join(f"{_f(a)},{_f(b)}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        elif s.kind == "points":
            out.extend(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="3" fill="{color}"/>' for a, b in pts)
        if s.label:
            ly = top + 14 * k + 10
            out.append(f'<rect x="{left + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
            out.append(f'<text x="{left + pw + 24}" y="{ly + 1}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
