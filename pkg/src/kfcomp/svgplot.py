"""Minimal SVG 1.1 line charts, written directly with no renderer.

Charts are batch artifacts: polylines on a framed plot area with tick
labels and a legend. Dotted strokes distinguish estimated from actual
series in the benchmark plots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    color: str = PALETTE[0]
    dashed: bool = False


def _ticks_linear(lo: float, hi: float, target: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _ticks_log(lo: float, hi: float):
    lo_d = math.floor(math.log10(lo))
    hi_d = math.ceil(math.log10(hi))
    return [10.0**d for d in range(lo_d, hi_d + 1)]


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:g}"


def line_chart(series, title: str = "", xlabel: str = "", ylabel: str = "",
               logx: bool = False, logy: bool = False,
               width: int = 860, height: int = 520) -> str:
    """Render series to an SVG document string."""
    ml, mr, mt, mb = 70, 180, 40, 55
    pw, ph = width - ml - mr, height - mt - mb

    def keep(s):
        x = np.asarray(s.x, dtype=float)
        y = np.asarray(s.y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        return x[ok], y[ok]

    cleaned = [keep(s) for s in series]
    xs = np.concatenate([c[0] for c in cleaned if len(c[0])] or [np.array([0.0, 1.0])])
    ys = np.concatenate([c[1] for c in cleaned if len(c[1])] or [np.array([0.0, 1.0])])
    xlo, xhi = float(xs.min()), float(xs.max())
    ylo, yhi = float(ys.min()), float(ys.max())
    if not logy:
        pad = 0.05 * (yhi - ylo + 1e-12)
        ylo, yhi = ylo - pad, yhi + pad
    if not logx and xhi == xlo:
        xhi = xlo + 1.0
    if logy and yhi == ylo:
        yhi = ylo * 10.0

    def tx(v):
        if logx:
            return ml + pw * (math.log10(v) - math.log10(xlo)) / (math.log10(xhi) - math.log10(xlo) or 1.0)
        return ml + pw * (v - xlo) / (xhi - xlo)

    def ty(v):
        if logy:
            return mt + ph * (1 - (math.log10(v) - math.log10(ylo)) / (math.log10(yhi) - math.log10(ylo) or 1.0))
        return mt + ph * (1 - (v - ylo) / (yhi - ylo))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="#333" stroke-width="1"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
                   f'font-size="16" font-family="sans-serif">{escape(title)}</text>')
    xticks = _ticks_log(xlo, xhi) if logx else _ticks_linear(xlo, xhi)
    for t in xticks:
        if not xlo <= t <= xhi:
            continue
        px = tx(t)
        out.append(f'<line x1="{px:.1f}" y1="{mt + ph}" x2="{px:.1f}" '
                   f'y2="{mt + ph + 5}" stroke="#333"/>')
        out.append(f'<text x="{px:.1f}" y="{mt + ph + 20}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{escape(_fmt(t))}</text>')
    yticks = _ticks_log(ylo, yhi) if logy else _ticks_linear(ylo, yhi)
    for t in yticks:
        if not ylo <= t <= yhi:
            continue
        py = ty(t)
        out.append(f'<line x1="{ml - 5}" y1="{py:.1f}" x2="{ml}" y2="{py:.1f}" stroke="#333"/>')
        out.append(f'<text x="{ml - 8}" y="{py + 4:.1f}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{escape(_fmt(t))}</text>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
                   f'font-size="13" font-family="sans-serif">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                   f'font-size="13" font-family="sans-serif" '
                   f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for s, (x, y) in zip(series, cleaned):
        if len(x) == 0:
            continue
        pts = " ".join(f"{tx(a):.2f},{ty(b):.2f}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="5,4"' if s.dashed else ""
        out.append(f'<polyline fill="none" stroke="{s.color}" stroke-width="1.6"'
                   f'{dash} points="{pts}"/>')
    ly = mt + 6
    for s in series:
        dash = ' stroke-dasharray="5,4"' if s.dashed else ""
        lx = ml + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly + 4}" x2="{lx + 26}" y2="{ly + 4}" '
                   f'stroke="{s.color}" stroke-width="1.6"{dash}/>')
        out.append(f'<text x="{lx + 32}" y="{ly + 8}" font-size="11" '
                   f'font-family="sans-serif">{escape(s.label)}</text>')
        ly += 17
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, series, **kwargs):
    doc = line_chart(series, **kwargs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(doc)
