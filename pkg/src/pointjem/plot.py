"""Static SVG rendering of point clouds as three orthographic views."""

from __future__ import annotations

import numpy as np

VIEWS = (("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2))
PANEL = 200
MARGIN = 10
RADIUS = 1.2


def render_svg(clouds, titles=None) -> str:
    """One row per cloud, one column per view; output depends only on the input."""
    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    if not clouds:
        raise ValueError("nothing to plot")
    titles = list(titles) if titles is not None else [f"cloud {i}" for i in range(len(clouds))]
    row_h = PANEL + 20
    width = 3 * PANEL + 4 * MARGIN
    height = len(clouds) * row_h + MARGIN
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r, (cloud, title) in enumerate(zip(clouds, titles)):
        top = MARGIN + r * row_h
        out.append(f'<text x="{MARGIN}" y="{top + 12}" font-family="monospace" font-size="12">{_escape(title)}</text>')
        if cloud.size:
            span = float(np.abs(cloud).max()) or 1.0
        else:
            span = 1.0
        half = (PANEL - 2 * MARGIN) / 2
        for v, (name, a, b) in enumerate(VIEWS):
            x0 = MARGIN + v * (PANEL + MARGIN)
            y0 = top + 18
            out.append(f'<g id="row{r}-{name}">')
            out.append(f'<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>')
            cx, cy = x0 + PANEL / 2, y0 + PANEL / 2
            for p in cloud:
                px = cx + p[a] / span * half
                py = cy - p[b] / span * half
                out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{RADIUS}" fill="#1f4e9c"/>')
            out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
