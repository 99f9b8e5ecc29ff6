"""Tiny deterministic SVG writer for diagnostic plots.

Coordinates are printed with fixed precision so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from typing import Sequence

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

W, H = 480, 360
ML, MR, MT, MB = 60, 110, 20, 50


def _f(x: float) -> str:
    return f"{x:.2f}"


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="14" font-size="12" text-anchor="middle">{_esc(title)}</text>',
    ]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _axes(xlabel, ylabel, xticks, yticks, sx, sy) -> list[str]:
    x0, y0, x1, y1 = ML, H - MB, W - MR, MT
    out = [f'<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>']
    for val, lab in xticks:
        x = sx(val)
        out.append(f'<line x1="{_f(x)}" y1="{y0}" x2="{_f(x)}" y2="{y0 + 4}" stroke="black"/>')
        out.append(f'<text x="{_f(x)}" y="{y0 + 16}" font-size="10" text-anchor="middle">{_esc(lab)}</text>')
    for val, lab in yticks:
        y = sy(val)
        out.append(f'<line x1="{x0 - 4}" y1="{_f(y)}" x2="{x0}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{_f(y + 3)}" font-size="10" text-anchor="end">{_esc(lab)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.0f}" y="{H - 12}" font-size="11" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{(y0 + y1) / 2:.0f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {(y0 + y1) / 2:.0f})">{_esc(ylabel)}</text>')
    return out


def line_plot(xs: Sequence[float], series: dict[str, Sequence[float]], *, title: str, xlabel: str,
              ylabel: str, xlog: bool = False, xticklabels: Sequence[str] | None = None) -> str:
    import math

    tx = (lambda v: math.log10(v)) if xlog else (lambda v: float(v))
    txs = [tx(x) for x in xs]
    lo_x, hi_x = min(txs), max(txs)
    if hi_x == lo_x:
        lo_x, hi_x = lo_x - 1, hi_x + 1
    ys = [y for s in series.values() for y in s]
    lo_y, hi_y = min(ys + [0.0]), max(ys + [1.0])
    sx = lambda v: ML + (v - lo_x) / (hi_x - lo_x) * (W - ML - MR)
    sy = lambda v: H - MB - (v - lo_y) / (hi_y - lo_y) * (H - MB - MT)
    labels = xticklabels or [f"{x:g}" for x in xs]
    yt = [(lo_y + i * (hi_y - lo_y) / 4, f"{lo_y + i * (hi_y - lo_y) / 4:.2f}") for i in range(5)]
    out = _header(title) + _axes(xlabel, ylabel, list(zip(txs, labels)), yt, sx, sy)
    for i, (name, vals) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(txs, vals))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        for x, y in zip(txs, vals):
            out.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3" fill="{c}"/>')
        ly = MT + 14 + 16 * i
        out.append(f'<line x1="{W - MR + 10}" y1="{ly}" x2="{W - MR + 28}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - MR + 32}" y="{ly + 4}" font-size="10">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _color(t: float) -> str:
    # low objective -> dark blue, high -> pale yellow
    t = min(max(t, 0.0), 1.0)
    a, b = (49, 54, 149), (254, 224, 144)
    r, g, bl = (round(a[j] + (b[j] - a[j]) * t) for j in range(3))
    return f"#{r:02x}{g:02x}{bl:02x}"


def simplex_surface(points: Sequence[tuple[float, float, float]], *, title: str, xlabel: str, ylabel: str,
                    marker: tuple[float, float] | None = None) -> str:
    """Objective over two free weights (the third is ``1 - x - y``).

    ``points`` holds ``(x, y, objective)``; ``marker`` stars the optimum.
    """
    vals = [p[2] for p in points]
    lo, hi = min(vals), max(vals)
    span = hi - lo if hi > lo else 1.0
    sx = lambda v: ML + v * (W - ML - MR)
    sy = lambda v: H - MB - v * (H - MB - MT)
    ticks = [(v, f"{v:.2f}") for v in (0.0, 0.25, 0.5, 0.75, 1.0)]
    out = _header(title) + _axes(xlabel, ylabel, ticks, ticks, sx, sy)
    out.append(f'<polyline points="{_f(sx(0))},{_f(sy(1))} {_f(sx(1))},{_f(sy(0))}" fill="none" '
               f'stroke="#999" stroke-dasharray="4 3"/>')
    for x, y, v in points:
        out.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="8" fill="{_color((v - lo) / span)}" '
                   f'stroke="black" stroke-width="0.5"><title>{v:.6f}</title></circle>')
    if marker is not None:
        mx, my = sx(marker[0]), sy(marker[1])
        out.append(f'<text x="{_f(mx)}" y="{_f(my + 5)}" font-size="16" text-anchor="middle" fill="#d62728">*</text>')
    for i in range(5):
        t = i / 4
        y = MT + 20 + 18 * i
        out.append(f'<rect x="{W - MR + 12}" y="{y - 8}" width="12" height="12" fill="{_color(t)}"/>')
        out.append(f'<text x="{W - MR + 28}" y="{y + 2}" font-size="10">{lo + t * span:.4f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
