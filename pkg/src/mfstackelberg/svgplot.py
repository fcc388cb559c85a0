"""Minimal SVG 1.1 line plots: axes, ticks, polylines and a legend."""
import math
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
          "#7f7f7f", "#bcbd22", "#17becf")
DASHES = ("", "6,4", "2,3", "8,3,2,3")


def nice_ticks(lo, hi, count=5):
    """Round tick positions covering [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0]
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _num(v):
    return f"{v:.2f}"


def _label(v):
    return f"{v:.6g}"


def line_plot(series, title="", xlabel="", ylabel="", width=640, height=420):
    """SVG text for ``series`` = [(label, x, y), ...]; dashes cycle after the colours."""
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([np.asarray(x, float) for _, x, _ in series])
    ys = np.concatenate([np.asarray(y, float) for _, _, y in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(np.nanmin(ys)), float(np.nanmax(ys))
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    if x1 <= x0:
        x1 = x0 + 1.0
    sx = lambda v: left + (v - x0) / (x1 - x0) * pw
    sy = lambda v: top + (y1 - v) / (y1 - y0) * ph
    out = [f'<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v in nice_ticks(x0, x1):
        if x0 - 1e-12 <= v <= x1 + 1e-12:
            X = sx(v)
            out.append(f'<line x1="{_num(X)}" y1="{top + ph}" x2="{_num(X)}" y2="{top + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{_num(X)}" y="{top + ph + 18}" text-anchor="middle">{_label(v)}</text>')
    for v in nice_ticks(y0, y1):
        if y0 <= v <= y1:
            Y = sy(v)
            out.append(f'<line x1="{left - 5}" y1="{_num(Y)}" x2="{left}" y2="{_num(Y)}" stroke="black"/>')
            out.append(f'<line x1="{left}" y1="{_num(Y)}" x2="{left + pw}" y2="{_num(Y)}" stroke="#dddddd"/>')
            out.append(f'<text x="{left - 8}" y="{_num(Y + 4)}" text-anchor="end">{_label(v)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (label, x, y) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        dash = DASHES[(k // len(COLORS)) % len(DASHES)]
        pts = " ".join(f"{_num(sx(a))},{_num(sy(b))}" for a, b in zip(x, y) if math.isfinite(b))
        style = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{style} points="{pts}"/>')
        ly = top + 14 + 18 * k
        lx = left + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"{style}/>')
        out.append(f'<text x="{lx + 30}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
