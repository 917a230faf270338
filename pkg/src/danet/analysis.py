"""Dense-connection strength maps and their SVG/CSV rendering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .fileio import atomic_write_bytes
from .model import DANet


@dataclass
class ConnectivityMap:
    """``values[s, l]``: mean |w| of layer l's bottleneck weights reading source s.

    Source 0 is the stage input and source s >= 1 is the output of layer s - 1.
    Entries with s > l are NaN.
    """

    stage: int
    values: np.ndarray  # [D, D]

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    def entries(self):
        """(source, layer, value) for every defined cell, row-major."""
        return [(s, l, float(self.values[s, l])) for s in range(self.num_layers)
                for l in range(self.num_layers) if s <= l]


def weight_connectivity(model: DANet, stage: int) -> ConnectivityMap:
    """Connectivity of stage ``stage`` (1-based)."""
    if not 1 <= stage <= len(model.stages):
        raise ValueError(f"stage must be in 1..{len(model.stages)}, got {stage}")
    st = model.stages[stage - 1]
    d = len(st.layers)
    if d == 0:
        raise ValueError(f"stage {stage} has no layers")
    c0, g = st.in_channels, st.growth
    out = np.full((d, d), np.nan)
    for l, layer in enumerate(st.layers):
        w = np.abs(layer.bottleneck.conv.weight.data.astype(np.float64))
        bounds = [0, c0] + [c0 + k * g for k in range(1, l + 1)]
        for s in range(l + 1):
            out[s, l] = w[:, bounds[s]:bounds[s + 1]].mean()
    return ConnectivityMap(stage=stage, values=out)


def _color(t: float) -> str:
    # white (weak) to dark blue (strong)
    lo, hi = np.array([255, 255, 255]), np.array([8, 48, 107])
    r, g, b = np.rint(lo + (hi - lo) * t).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def connectivity_svg(cmap: ConnectivityMap, cell: int = 24) -> str:
    """Grid with rows = source, columns = target layer; colour normalised per map."""
    d = cmap.num_layers
    vals = [v for _, _, v in cmap.entries()]
    lo, hi = min(vals), max(vals)
    span = hi - lo
    margin = 30
    size_w, size_h = margin + d * cell, margin + d * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_w}" height="{size_h}" '
        f'viewBox="0 0 {size_w} {size_h}">',
        f'<title>stage {cmap.stage} connectivity</title>',
    ]
    for s in range(d):
        for l in range(d):
            v = cmap.values[s, l]
            x, y = margin + l * cell, margin + s * cell
            if math.isnan(v):
                fill = "#eeeeee"
            else:
                fill = _color((v - lo) / span if span > 0 else 1.0)
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" '
                         f'stroke="#999999" stroke-width="0.5"/>')
    parts.append(f'<text x="{margin}" y="12" font-size="10">target layer</text>')
    parts.append(f'<text x="2" y="{margin + 10}" font-size="10">src</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def connectivity_csv(cmap: ConnectivityMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "layer", "value"])
    for s, l, v in cmap.entries():
        w.writerow([s, l, repr(v)])
    return buf.getvalue()


def emit_heatmap_svg(cmap: ConnectivityMap, path: Union[str, Path]) -> Path:
    """Write the SVG to ``path`` and the raw values to ``path`` with a ``.csv`` suffix."""
    if cmap.num_layers == 0:
        raise ValueError("empty connectivity map")
    path = Path(path)
    sidecar = path.with_suffix(".csv")
    atomic_write_bytes(path, connectivity_svg(cmap).encode("utf-8"))
    atomic_write_bytes(sidecar, connectivity_csv(cmap).encode("utf-8"))
    return sidecar
