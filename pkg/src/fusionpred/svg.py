"""Minimal deterministic SVG plots: line charts and bird's-eye trajectory overlays."""
from __future__ import annotations

from html import escape

import numpy as np

WIDTH, HEIGHT, MARGIN = 640, 480, 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _num(x: float) -> str:
    return f"{x:.2f}"


def _scale(lo: float, hi: float, a: float, b: float):
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _frame(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
           f'fill="none" stroke="#444"/>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2})">'
           f'{escape(ylabel)}</text>']
    for v, anchor, x, y in ((xr[0], "start", MARGIN, HEIGHT - MARGIN + 16),
                            (xr[1], "end", WIDTH - MARGIN, HEIGHT - MARGIN + 16)):
        out.append(f'<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3g}</text>')
    for v, y in ((yr[0], HEIGHT - MARGIN), (yr[1], MARGIN + 10)):
        out.append(f'<text x="{MARGIN - 4}" y="{y}" text-anchor="end">{v:.3g}</text>')
    return out


def _polyline(xy, color: str, width: float = 1.5, dash: str | None = None, opacity: float = 1.0) -> str:
    pts = " ".join(f"{_num(x)},{_num(y)}" for x, y in xy)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    if opacity < 1:
        extra += f' stroke-opacity="{opacity}"'
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{extra} points="{pts}"/>'


def _legend(labels) -> list[str]:
    out = []
    for i, label in enumerate(labels):
        y = MARGIN + 14 + 16 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{WIDTH - MARGIN - 110}" y1="{y - 4}" x2="{WIDTH - MARGIN - 92}" y2="{y - 4}" '
                   f'stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 88}" y="{y}">{escape(str(label))}</text>')
    return out


def line_chart(series: dict, title: str, xlabel: str, ylabel: str, xrange=None, yrange=None) -> str:
    """``series``: label -> ``(x, y)`` arrays."""
    xs = [np.asarray(x, float) for x, _ in series.values() if len(x)]
    ys = [np.asarray(y, float) for _, y in series.values() if len(y)]
    xr = xrange or ((min(x.min() for x in xs), max(x.max() for x in xs)) if xs else (0.0, 1.0))
    yr = yrange or ((min(y.min() for y in ys), max(y.max() for y in ys)) if ys else (0.0, 1.0))
    sx = _scale(*xr, MARGIN, WIDTH - MARGIN)
    sy = _scale(*yr, HEIGHT - MARGIN, MARGIN)
    out = _frame(title, xlabel, ylabel, xr, yr)
    for i, (x, y) in enumerate(series.values()):
        if len(x):
            out.append(_polyline(zip(sx(np.asarray(x, float)), sy(np.asarray(y, float))), PALETTE[i % len(PALETTE)]))
    out += _legend(series)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bev_plot(tracks: dict, title: str, predictions: dict | None = None) -> str:
    """Top-down view; ``tracks``: id -> ``N x 2`` world XY; ``predictions``: id -> list of ``T x 2``."""
    pts = [np.asarray(t, float).reshape(-1, 2) for t in tracks.values()]
    for trajs in (predictions or {}).values():
        pts += [np.asarray(t, float).reshape(-1, 2) for t in trajs]
    allp = np.vstack(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(axis=0) - 1.0, allp.max(axis=0) + 1.0
    span = max(hi - lo)
    mid = (lo + hi) / 2
    lo, hi = mid - span / 2, mid + span / 2  # equal aspect
    sx = _scale(lo[0], hi[0], MARGIN, WIDTH - MARGIN)
    sy = _scale(lo[1], hi[1], HEIGHT - MARGIN, MARGIN)
    out = _frame(title, "x (m)", "y (m)", (lo[0], hi[0]), (lo[1], hi[1]))
    for i, (tid, xy) in enumerate(sorted(tracks.items())):
        xy = np.asarray(xy, float).reshape(-1, 2)
        c = PALETTE[i % len(PALETTE)]
        out.append(_polyline(zip(sx(xy[:, 0]), sy(xy[:, 1])), c))
        if len(xy):
            out.append(f'<text x="{_num(sx(xy[-1, 0]) + 3)}" y="{_num(sy(xy[-1, 1]) - 3)}" fill="{c}">{tid}</text>')
        for traj in (predictions or {}).get(tid, []):
            traj = np.asarray(traj, float).reshape(-1, 2)
            out.append(_polyline(zip(sx(traj[:, 0]), sy(traj[:, 1])), c, 1.0, "4 3", 0.6))
    out.append("</svg>")
    return "\n".join(out) + "\n"
