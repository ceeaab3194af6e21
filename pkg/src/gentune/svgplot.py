"""Minimal deterministic SVG charts (scatter, line, heatmap)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

W, H = 640, 420
ML, MR, MT, MB = 70, 20, 40, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


class _Axes:
    def __init__(self, xlim, ylim):
        x0, x1 = xlim
        y0, y1 = ylim
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            pad = abs(y0) * 0.01 or 1.0
            y0, y1 = y0 - pad, y1 + pad
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1

    def px(self, x):
        return ML + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, y):
        return H - MB - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (H - MT - MB)


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" '
           f'fill="none" stroke="black"/>']
    for t in np.linspace(ax.x0, ax.x1, 5):
        x = ax.px(t)
        out.append(f'<line x1="{x:.2f}" y1="{H - MB}" x2="{x:.2f}" y2="{H - MB + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{H - MB + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in np.linspace(ax.y0, ax.y1, 5):
        y = ax.py(t)
        out.append(f'<line x1="{ML - 4}" y1="{y:.2f}" x2="{ML}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ML - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{H / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {H / 2})">{ylabel}</text>')
    return out


def scatter(x, y, labels: Sequence[str | None] | None = None, title: str = "",
            xlabel: str = "", ylabel: str = "", highlight: Sequence[str] = ()) -> str:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ax = _Axes((x.min(), x.max()), (y.min(), y.max()))
    out = _frame(ax, title, xlabel, ylabel)
    for i, (a, b) in enumerate(zip(ax.px(x), ax.py(y))):
        lab = labels[i] if labels else None
        hot = lab in highlight
        out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" '
                   f'fill="{PALETTE[1] if hot else PALETTE[0]}"/>')
        if hot:
            out.append(f'<text x="{a + 5:.2f}" y="{b - 4:.2f}">{lab}</text>')
    return "\n".join(out + ["</svg>"]) + "\n"


def lines(t, series: Sequence[tuple[str, np.ndarray]], title: str = "", xlabel: str = "",
          ylabel: str = "", colors: Sequence[str] | None = None, width: float = 1.0) -> str:
    t = np.asarray(t, float)
    ys = np.concatenate([np.asarray(s, float) for _, s in series])
    ax = _Axes((t.min(), t.max()), (ys.min(), ys.max()))
    out = _frame(ax, title, xlabel, ylabel)
    legend = {}
    for i, (name, s) in enumerate(series):
        color = colors[i] if colors else PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(ax.px(t), ax.py(s)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="{width}" stroke-opacity="0.8"/>')
        legend.setdefault(name.split("#")[0], color)
    for j, (name, color) in enumerate(legend.items()):
        y = MT + 14 + 14 * j
        out.append(f'<line x1="{W - MR - 120}" y1="{y - 4}" x2="{W - MR - 100}" y2="{y - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - MR - 95}" y="{y}">{name}</text>')
    return "\n".join(out + ["</svg>"]) + "\n"


def heatmap(xs, ys, z, title: str = "", xlabel: str = "", ylabel: str = "",
            marker: tuple[float, float] | None = None, levels: int = 12) -> str:
    """Filled-level map of ``z[i, j]`` at (xs[i], ys[j])."""
    xs, ys, z = np.asarray(xs, float), np.asarray(ys, float), np.asarray(z, float)
    ax = _Axes((xs.min(), xs.max()), (ys.min(), ys.max()))
    out = _frame(ax, title, xlabel, ylabel)
    edges = np.linspace(z.min(), z.max(), levels + 1)
    dx = (W - ML - MR) / (len(xs) - 1)
    dy = (H - MT - MB) / (len(ys) - 1)
    for i, a in enumerate(ax.px(xs)):
        for j, b in enumerate(ax.py(ys)):
            lvl = int(np.clip(np.searchsorted(edges, z[i, j], side="right") - 1, 0, levels - 1))
            shade = int(255 - 200 * lvl / max(levels - 1, 1))
            out.append(f'<rect x="{a - dx / 2:.2f}" y="{b - dy / 2:.2f}" width="{dx:.2f}" '
                       f'height="{dy:.2f}" fill="rgb({shade},{shade},255)"/>')
    if marker is not None:
        a, b = ax.px(marker[0]), ax.py(marker[1])
        out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="5" fill="{PALETTE[1]}"/>')
    return "\n".join(out + ["</svg>"]) + "\n"
