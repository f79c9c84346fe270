"""Minimal static SVG rendering for run outputs (no plotting dependency).

Produces two kinds of figures: per-species trajectory overlays (observed
markers vs. predicted lines, optionally log-scaled axes) and a
coefficient chart with one truth/estimate marker pair per trainable
reaction. Every plot is paired with a CSV by the CLI, so anything can be
re-rendered externally.
"""

from __future__ import annotations

import math

import numpy as np

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _axis_transform(lo: float, hi: float, log: bool):
    if log:
        lo = math.log10(max(lo, 1e-300))
        hi = math.log10(max(hi, 1e-300))
    if hi - lo < 1e-12:
        hi = lo + 1.0

    def to_unit(v):
        x = math.log10(max(v, 1e-300)) if log else v
        return (x - lo) / (hi - lo)

    return to_unit


def _polyline(xs, ys, color, width=1.2, dasharray=None):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    dash = f' stroke-dasharray="{dasharray}"' if dasharray else ""
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="{width}"'
        f'{dash} points="{pts}"/>'
    )


def _text(x, y, s, size=11, anchor="start"):
    return (
        f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
        f'font-family="sans-serif" text-anchor="{anchor}">{s}</text>'
    )


class _Panel:
    def __init__(self, x0, y0, w, h, x_range, y_range, log_x, log_y):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.tx = _axis_transform(*x_range, log_x)
        self.ty = _axis_transform(*y_range, log_y)

    def px(self, x):
        return self.x0 + self.tx(x) * self.w

    def py(self, y):
        return self.y0 + self.h - self.ty(y) * self.h

    def frame(self, title):
        return (
            f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" '
            f'height="{self.h}" fill="none" stroke="#999"/>'
            + _text(self.x0 + 3, self.y0 - 4, title, size=10)
        )


def trajectory_overlay_svg(times, observed, predicted, species_names,
                           log_x=False, per_row=4, panel=170, pad=34) -> str:
    """One panel per species: observed points, predicted line."""
    times = np.asarray(times)
    observed = np.asarray(observed)
    n_species = observed.shape[1]
    rows = (n_species + per_row - 1) // per_row
    width = per_row * (panel + pad) + pad
    height = rows * (panel + pad) + pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    x_range = (times[0], times[-1])
    for j in range(n_species):
        r, c = divmod(j, per_row)
        lo = min(observed[:, j].min(),
                 predicted[:, j].min() if predicted is not None else np.inf)
        hi = max(observed[:, j].max(),
                 predicted[:, j].max() if predicted is not None else -np.inf)
        p = _Panel(pad + c * (panel + pad), pad + r * (panel + pad),
                   panel, panel, x_range, (lo, hi), log_x, False)
        parts.append(p.frame(species_names[j]))
        if predicted is not None:
            parts.append(_polyline(
                [p.px(t) for t in times],
                [p.py(v) for v in predicted[:, j]],
                _COLORS[1],
            ))
        for t, v in zip(times, observed[:, j]):
            parts.append(
                f'<circle cx="{p.px(t):.2f}" cy="{p.py(v):.2f}" r="1.8" '
                f'fill="none" stroke="{_COLORS[0]}" stroke-width="0.9"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def coefficient_scatter_svg(coeff_table, width=640, height=360, pad=50) -> str:
    """Truth circles and estimate crosses vs. reaction id, log10 scale.

    Frozen reactions are excluded: the chart shows exactly the trainable
    coefficients the run estimated.
    """
    rows = [r for r in coeff_table if not r["frozen"]]
    ids = [r["id"] for r in rows]
    vals = [math.log10(r["truth"]) for r in rows] + [
        math.log10(max(r["estimate"], 1e-300)) for r in rows
    ]
    lo, hi = min(vals) - 0.5, max(vals) + 0.5
    p = _Panel(pad, pad, width - 2 * pad, height - 2 * pad,
               (min(ids) - 1, max(ids) + 1), (lo, hi), False, False)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        p.frame("log10 rate coefficient: truth (o) vs estimate (x)"),
    ]
    for r in rows:
        x = p.px(r["id"])
        yt = p.py(math.log10(r["truth"]))
        ye = p.py(math.log10(max(r["estimate"], 1e-300)))
        parts.append(
            f'<circle cx="{x:.2f}" cy="{yt:.2f}" r="4" fill="none" '
            f'stroke="{_COLORS[4]}" stroke-width="1.5" class="truth"/>'
        )
        parts.append(
            f'<g class="estimate" stroke="{_COLORS[0]}" stroke-width="1.5">'
            f'<line x1="{x-3:.2f}" y1="{ye-3:.2f}" x2="{x+3:.2f}" y2="{ye+3:.2f}"/>'
            f'<line x1="{x-3:.2f}" y1="{ye+3:.2f}" x2="{x+3:.2f}" y2="{ye-3:.2f}"/>'
            "</g>"
        )
        parts.append(_text(x, height - pad + 14, str(r["id"]), 8, "middle"))
    parts.append(_text(pad, height - 8,
                       "x axis: reaction id; y axis: log10 k", 10))
    parts.append("</svg>")
    return "\n".join(parts)


def loss_curve_svg(losses_by_stage: dict, width=640, height=360, pad=50) -> str:
    """Per-stage training loss on a log10 y-axis."""
    all_losses = [v for curve in losses_by_stage.values() for v in curve if v > 0]
    if not all_losses:
        all_losses = [1.0]
    n_max = max(len(c) for c in losses_by_stage.values()) or 1
    p = _Panel(pad, pad, width - 2 * pad, height - 2 * pad,
               (0, max(n_max - 1, 1)), (min(all_losses), max(all_losses)),
               False, True)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        p.frame("training loss (log scale)"),
    ]
    for i, (name, curve) in enumerate(sorted(losses_by_stage.items())):
        color = _COLORS[i % len(_COLORS)]
        pts = [(p.px(e), p.py(max(v, 1e-300))) for e, v in enumerate(curve)]
        if pts:
            parts.append(_polyline([x for x, _ in pts], [y for _, y in pts],
                                   color))
            parts.append(_text(pad + 6, pad + 14 + 12 * i, name, 10))
    parts.append("</svg>")
    return "\n".join(parts)
