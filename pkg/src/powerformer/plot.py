"""Dependency-free SVG line plot for learning curves."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 500
MARGIN = dict(left=70, right=30, top=40, bottom=60)


def _nice_ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + 0.5 * step, step)]


def _fmt(v):
    return f"{v:.6g}"


def line_plot_svg(series, title="", xlabel="step", ylabel="", y_range=None):
    """Render ``{label: (x, y)}`` as an 800x500 SVG document string."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
    xs = [np.asarray(x, float) for x, _ in series.values()]
    ys = [np.asarray(y, float) for _, y in series.values()]
    allx = np.concatenate(xs) if xs else np.zeros(1)
    ally = np.concatenate(ys) if ys else np.zeros(1)
    ally = ally[np.isfinite(ally)] if np.isfinite(ally).any() else np.zeros(1)
    x0, x1 = float(allx.min(initial=0.0)), float(allx.max(initial=1.0))
    y0, y1 = y_range if y_range is not None else (float(ally.min()), float(ally.max()))
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{escape(title)}</text>',
    ]
    bottom, left = MARGIN["top"] + ph, MARGIN["left"]
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for t in _nice_ticks(x0, x1):
        if x0 <= t <= x1:
            out.append(f'<line x1="{px(t):.2f}" y1="{bottom}" x2="{px(t):.2f}" y2="{bottom + 5}" stroke="black"/>')
            out.append(f'<text x="{px(t):.2f}" y="{bottom + 20}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="12">{_fmt(t)}</text>')
    for t in _nice_ticks(y0, y1):
        if y0 <= t <= y1:
            out.append(f'<line x1="{left}" y1="{py(t):.2f}" x2="{left + pw}" y2="{py(t):.2f}" '
                       'stroke="#dddddd"/>')
            out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end" '
                       f'font-family="sans-serif" font-size="12">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 15}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="14">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="14" transform="rotate(-90 18 {MARGIN["top"] + ph / 2})">{escape(ylabel)}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        x, y = np.asarray(x, float), np.asarray(y, float)
        keep = np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[keep], y[keep]))
        color = colors[i % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN["top"] + 18 * (i + 1)
        out.append(f'<line x1="{left + pw - 150}" y1="{ly - 4}" x2="{left + pw - 125}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 120}" y="{ly}" font-family="sans-serif" '
                   f'font-size="12">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
