"""Static SVG line plots and heatmaps, written as plain text."""

from __future__ import annotations

from html import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"]


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def _doc(body: list[str], w: int = WIDTH, h: int = HEIGHT) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
            f'font-family="sans-serif" font-size="12">')
    return "\n".join([head, f'<rect width="{w}" height="{h}" fill="white"/>', *body, "</svg>", ""])


def line_plot(series, title: str = "", xlabel: str = "", ylabel: str = "", logy: bool = False) -> str:
    """``series`` is a list of (label, xs, ys).  Nonpositive values are dropped on a log axis."""
    clean = []
    for label, xs, ys in series:
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        ok = np.isfinite(xs) & np.isfinite(ys) & ((ys > 0) if logy else True)
        if ok.any():
            clean.append((label, xs[ok], np.log10(ys[ok]) if logy else ys[ok]))
    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]
    body = [f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if not clean:
        body.append(f'<text x="{WIDTH / 2}" y="{HEIGHT / 2}" text-anchor="middle">no data</text>')
        return _doc(body)
    x_all = np.concatenate([c[1] for c in clean])
    y_all = np.concatenate([c[2] for c in clean])
    x0, x1 = float(x_all.min()), float(x_all.max())
    y0, y1 = float(y_all.min()), float(y_all.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    sx = lambda x: L + (x - x0) / (x1 - x0) * (R - L)  # noqa: E731
    sy = lambda y: B - (y - y0) / (y1 - y0) * (B - T)  # noqa: E731
    body.append(f'<rect x="{L}" y="{T}" width="{R - L}" height="{B - T}" fill="none" stroke="#444"/>')
    for v in _ticks(x0, x1):
        body.append(f'<line x1="{sx(v):.1f}" y1="{B}" x2="{sx(v):.1f}" y2="{B + 5}" stroke="#444"/>')
        body.append(f'<text x="{sx(v):.1f}" y="{B + 18}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _ticks(y0, y1):
        lab = _fmt(10 ** v) if logy else _fmt(v)
        body.append(f'<line x1="{L - 5}" y1="{sy(v):.1f}" x2="{L}" y2="{sy(v):.1f}" stroke="#444"/>')
        body.append(f'<text x="{L - 8}" y="{sy(v) + 4:.1f}" text-anchor="end">{lab}</text>')
    body.append(f'<text x="{(L + R) / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="16" y="{(T + B) / 2}" text-anchor="middle" '
                f'transform="rotate(-90 16 {(T + B) / 2})">{escape(ylabel)}</text>')
    for i, (label, xs, ys) in enumerate(clean):
        col = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
        if len(xs) > 1:
            body.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.6"/>')
        if len(xs) <= 40:
            body.extend(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{col}"/>' for a, b in zip(xs, ys))
        ly = T + 16 * i + 8
        body.append(f'<line x1="{R + 10}" y1="{ly}" x2="{R + 30}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        body.append(f'<text x="{R + 35}" y="{ly + 4}">{escape(str(label))}</text>')
    return _doc(body)


def _color(u: float) -> str:
    # blue - white - red diverging ramp on [0, 1]
    u = min(max(u, 0.0), 1.0)
    if u < 0.5:
        a = u / 0.5
        r, g, b = 59 + a * 196, 76 + a * 179, 192 + a * 63
    else:
        a = (u - 0.5) / 0.5
        r, g, b = 255 - a * 75, 255 - a * 251, 255 - a * 217
    return f"#{int(r):02x}{int(g):02x}{int(b):02x}"


def heatmap(values, title: str = "", max_cells: int = 64) -> str:
    """Square heatmap of a 2-D array (subsampled to at most ``max_cells`` per side)."""
    v = np.asarray(values, float)
    step = max(1, int(np.ceil(max(v.shape) / max_cells)))
    v = v[::step, ::step]
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    span = hi - lo if hi > lo else 1.0
    size = 360
    cw, ch = size / v.shape[1], size / v.shape[0]
    ox, oy = 40, 40
    body = [f'<text x="{ox + size / 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>']
    # row i is the first coordinate; draw it along x, second coordinate upward
    for i in range(v.shape[0]):
        for j in range(v.shape[1]):
            x = ox + i * cw
            y = oy + size - (j + 1) * ch
            body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cw + 0.05:.2f}" height="{ch + 0.05:.2f}" '
                        f'fill="{_color((v[i, j] - lo) / span)}"/>')
    bx = ox + size + 20
    for s in range(21):
        u = s / 20
        body.append(f'<rect x="{bx}" y="{oy + size * (1 - u) - size / 21:.2f}" width="16" '
                    f'height="{size / 21 + 0.5:.2f}" fill="{_color(u)}"/>')
    body.append(f'<text x="{bx + 22}" y="{oy + 8}">{_fmt(hi)}</text>')
    body.append(f'<text x="{bx + 22}" y="{oy + size}">{_fmt(lo)}</text>')
    return _doc(body, w=ox + size + 110, h=oy + size + 30)
