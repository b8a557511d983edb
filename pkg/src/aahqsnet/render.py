"""SVG rendering of element fields and EIEI class maps.

Output is plain SVG text with fixed number formatting, so identical
inputs give byte-identical files.  Field colours interpolate linearly
between the stops in :data:`FIELD_STOPS` over ``[min, max]`` of the
values (a constant field takes the lowest stop).
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .mesh import Mesh
from .metrics import ANOMALY, ARTIFACT, BACKGROUND

# Five-stop approximation of viridis, low to high.
FIELD_STOPS = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=float)

CLASS_COLORS = {
    BACKGROUND: "#1f4fd8",
    ARTIFACT: "#f5d000",
    ANOMALY: "#d7191c",
}

SIZE = 400


def field_colors(values) -> list[str]:
    """Hex colour per value on the :data:`FIELD_STOPS` scale."""
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    t = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pos = t * (len(FIELD_STOPS) - 1)
    i = np.minimum(pos.astype(int), len(FIELD_STOPS) - 2)
    frac = (pos - i)[:, None]
    rgb = FIELD_STOPS[i] * (1 - frac) + FIELD_STOPS[i + 1] * frac
    return ["#%02x%02x%02x" % tuple(int(round(c)) for c in row) for row in rgb]


def _svg(mesh: Mesh, fills: list[str], title: str | None) -> str:
    half = SIZE / 2
    pts = mesh.nodes[mesh.triangles] * (half - 4)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
             f'viewBox="0 0 {SIZE} {SIZE}">']
    if title:
        lines.append(f"<title>{title}</title>")
    lines.append(f'<g transform="translate({half:.0f},{half:.0f}) scale(1,-1)">')
    for tri, fill in zip(pts, fills):
        coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in tri)
        lines.append(f'<polygon points="{coords}" fill="{fill}" stroke="{fill}" stroke-width="0.3"/>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def field_svg(mesh: Mesh, values, title: str | None = None) -> str:
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_T,):
        raise ValueError(f"field must have {mesh.n_T} entries")
    return _svg(mesh, field_colors(values), title)


def class_map_svg(mesh: Mesh, labels, title: str | None = None) -> str:
    """Blue background, yellow artifacts, red anomalies."""
    labels = np.asarray(labels)
    if labels.shape != (mesh.n_T,):
        raise ValueError(f"label map must have {mesh.n_T} entries")
    try:
        fills = [CLASS_COLORS[int(c)] for c in labels]
    except KeyError as exc:
        raise ValueError(f"unknown class label {exc.args[0]}") from None
    return _svg(mesh, fills, title)


def write_text_atomic(path, text: str) -> Path:
    """Write ``text`` to a temporary sibling, then rename it into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def render_field(mesh: Mesh, values, out, title: str | None = None) -> Path:
    return write_text_atomic(out, field_svg(mesh, values, title))


def render_class_map(mesh: Mesh, labels, out, title: str | None = None) -> Path:
    return write_text_atomic(out, class_map_svg(mesh, labels, title))
