"""Minimal SVG plots: line charts and trajectory traces over a track."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .artifacts import atomic_write_text

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


def _nice_ticks(lo, hi, n=5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.floor(lo / step) * step
    return [start + i * step for i in range(int(math.ceil((hi - start) / step)) + 1)]


def _fmt(v):
    return f"{v:.4g}"


def line_plot(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "",
              desc: str = "", width: int = 640, height: int = 400):
    """``series`` maps a label to ``(xs, ys)``.  Non-finite points are skipped."""
    left, right, top, bottom = 70, 160, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for xs, _ in series.values() for x in xs if math.isfinite(x)]
    ys_all = [y for _, ys in series.values() for y in ys if math.isfinite(y)]
    xlo, xhi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    ylo, yhi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    xt, yt = _nice_ticks(xlo, xhi), _nice_ticks(ylo, yhi)
    xlo, xhi, ylo, yhi = xt[0], xt[-1], yt[0], yt[-1]

    def sx(x):
        return left + (x - xlo) / (xhi - xlo or 1.0) * pw

    def sy(y):
        return top + ph - (y - ylo) / (yhi - ylo or 1.0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    if desc:
        out.append(f"<desc>{escape(desc)}</desc>")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for x in xt:
        out.append(f'<line x1="{sx(x):.1f}" y1="{top}" x2="{sx(x):.1f}" y2="{top + ph}" stroke="#eee"/>')
        out.append(f'<text x="{sx(x):.1f}" y="{top + ph + 16}" text-anchor="middle">{_fmt(x)}</text>')
    for y in yt:
        out.append(f'<line x1="{left}" y1="{sy(y):.1f}" x2="{left + pw}" y2="{sy(y):.1f}" stroke="#eee"/>')
        out.append(f'<text x="{left - 6}" y="{sy(y) + 4:.1f}" text-anchor="end">{_fmt(y)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(16,{top + ph / 2}) rotate(-90)" text-anchor="middle">'
               f'{escape(ylabel)}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys)
                       if math.isfinite(x) and math.isfinite(y))
        if pts:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>\n")
    return atomic_write_text(path, "\n".join(out))


def _wall_lines(track):
    c = track.centerline
    d = np.roll(c, -1, axis=0) - np.roll(c, 1, axis=0)
    n = np.column_stack([-d[:, 1], d[:, 0]]) / np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-12)[:, None]
    return c + track.half_width * n, c - track.half_width * n


def trajectory_plot(track, trajectories: dict, path, title: str = "", desc: str = "", scale: float = 8.0):
    """Centerline, corridor edges and one polyline per trajectory (``(n, >=2)``
    arrays of x, y).  World y points up."""
    xmin, ymin, xmax, ymax = track.extent
    pad = 20
    width = int((xmax - xmin) * scale) + 2 * pad + 150
    height = int((ymax - ymin) * scale) + 2 * pad + 30

    def pts(arr):
        arr = np.asarray(arr)
        return " ".join(f"{pad + (x - xmin) * scale:.1f},{30 + pad + (ymax - y) * scale:.1f}"
                        for x, y in arr[:, :2])

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    if desc:
        out.append(f"<desc>{escape(desc)}</desc>")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(f'<text x="{pad}" y="20" font-size="14">{escape(title)}</text>')
    for wall in _wall_lines(track):
        out.append(f'<polygon points="{pts(wall)}" fill="none" stroke="black" stroke-width="1"/>')
    out.append(f'<polygon points="{pts(track.centerline)}" fill="none" stroke="#bbb" '
               f'stroke-dasharray="4 3"/>')
    for i, (label, traj) in enumerate(trajectories.items()):
        color = PALETTE[i % len(PALETTE)]
        if len(traj) > 1:
            out.append(f'<polyline points="{pts(traj)}" fill="none" stroke="{color}" stroke-width="1.4"/>')
        ly = 40 + 16 * i
        out.append(f'<line x1="{width - 140}" y1="{ly - 4}" x2="{width - 120}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - 114}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>\n")
    return atomic_write_text(path, "\n".join(out))
