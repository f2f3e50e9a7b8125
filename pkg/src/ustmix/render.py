"""Minimal SVG output for curves, trees and domain outlines."""

from __future__ import annotations

from xml.sax.saxutils import quoteattr

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]


def _bbox(curves, pad):
    pts = np.vstack([np.asarray(c, float).reshape(-1, 2) for c in curves if len(c)])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    return lo - pad * span, hi + pad * span


def svg_document(curves, colors=None, width: int = 600, stroke: float = 1.0, pad: float = 0.05, closed=None, labels=None) -> str:
    """One polyline per curve, y axis pointing up."""
    curves = [np.asarray(c, float).reshape(-1, 2) for c in curves]
    if not curves:
        raise ValueError("nothing to draw")
    lo, hi = _bbox(curves, pad)
    scale = width / float((hi - lo).max())
    h = int(round((hi[1] - lo[1]) * scale))
    w = int(round((hi[0] - lo[0]) * scale))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    for k, c in enumerate(curves):
        col = (colors or PALETTE)[k % len(colors or PALETTE)]
        xy = (c - lo) * scale
        xy[:, 1] = h - xy[:, 1]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
        tag = "polygon" if closed and closed[k] else "polyline"
        title = f"<title>{labels[k]}</title>" if labels else ""
        out.append(f'<{tag} points={quoteattr(pts)} fill="none" stroke="{col}" stroke-width="{stroke}">{title}</{tag}>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _diverging(t: float) -> str:
    """Blue-white-red for t in [-1, 1]."""
    t = max(-1.0, min(1.0, t))
    if t < 0:
        r = g = int(round(255 * (1 + t)))
        b = 255
    else:
        r = 255
        g = b = int(round(255 * (1 - t)))
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_heat(polygons, values, width: int = 600, pad: float = 0.05) -> str:
    """Filled polygons coloured by value, centred at the median."""
    polys = [np.asarray(p, float).reshape(-1, 2) for p in polygons]
    vals = np.asarray(values, float)
    mid = float(np.median(vals))
    span = float(np.max(np.abs(vals - mid))) or 1.0
    lo, hi = _bbox(polys, pad)
    scale = width / float((hi - lo).max())
    h = int(round((hi[1] - lo[1]) * scale))
    w = int(round((hi[0] - lo[0]) * scale))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    for p, v in zip(polys, vals):
        xy = (p - lo) * scale
        xy[:, 1] = h - xy[:, 1]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
        out.append(f'<polygon points="{pts}" fill="{_diverging((v - mid) / span)}" stroke="none"><title>{v:.4f}</title></polygon>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
