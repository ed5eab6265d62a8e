"""Dependency-free SVG rendering of trials and detected partitions.

Output is a plain string with fixed formatting, so renders of identical
inputs are byte-identical and can be golden-tested.
"""

from __future__ import annotations

from typing import Mapping

from .grid import Partition, PlotCoord, TrialGrid

CELL = 22
MARGIN = 4

#: boundary colors cycled per patch id order
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _value_color(value: float, vmin: float, vmax: float) -> str:
    """Blue-white-red ramp over the value range."""
    if vmax <= vmin:
        t = 0.5
    else:
        t = (value - vmin) / (vmax - vmin)
    if t < 0.5:
        f = t / 0.5
        r, g, b = int(49 + f * (255 - 49)), int(102 + f * (255 - 102)), 255
    else:
        f = (t - 0.5) / 0.5
        r, g, b = 255, int(255 - f * (255 - 80)), int(255 - f * (255 - 60))
    return f"#{r:02x}{g:02x}{b:02x}"


def _cell_rect(coord: PlotCoord, fill: str, stroke: str = "#cccccc") -> str:
    i, j = coord
    x = MARGIN + j * CELL
    y = MARGIN + i * CELL
    return (
        f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
        f'fill="{fill}" stroke="{stroke}" stroke-width="1"/>'
    )


def _boundary_segments(partition: Partition) -> list[str]:
    """One line per cell edge where the rook neighbour belongs elsewhere."""
    out = []
    shape = partition.shape
    for idx, patch in enumerate(partition):
        color = PALETTE[idx % len(PALETTE)]
        for (i, j) in sorted(patch.coords):
            x = MARGIN + j * CELL
            y = MARGIN + i * CELL
            edges = (
                ((i - 1, j), (x, y, x + CELL, y)),
                ((i + 1, j), (x, y + CELL, x + CELL, y + CELL)),
                ((i, j - 1), (x, y, x, y + CELL)),
                ((i, j + 1), (x + CELL, y, x + CELL, y + CELL)),
            )
            for nb, (x1, y1, x2, y2) in edges:
                if nb in patch.coords:
                    continue
                out.append(
                    f'<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" '
                    f'stroke="{color}" stroke-width="3"/>'
                )
    return out


def svg_heatmap(
    trial: TrialGrid | None = None,
    partition: Partition | None = None,
) -> str:
    """Heatmap of trial values, patch map, or heatmap with patch overlay.

    With only a partition, cells are flood-colored per patch; with a trial,
    cells show the value ramp and an optional partition draws colored
    boundaries on top.
    """
    if trial is None and partition is None:
        raise ValueError("need a trial, a partition, or both")
    shape = trial.shape if trial is not None else partition.shape
    width = 2 * MARGIN + shape.n_cols * CELL
    height = 2 * MARGIN + shape.n_rows * CELL
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if trial is not None:
        values = trial.values
        vmin = min(values.values())
        vmax = max(values.values())
        for coord in trial.coords:
            parts.append(_cell_rect(coord, _value_color(values[coord], vmin, vmax)))
    else:
        for idx, patch in enumerate(partition):
            fill = PALETTE[idx % len(PALETTE)]
            for coord in sorted(patch.coords):
                parts.append(_cell_rect(coord, fill))
    if partition is not None:
        parts.extend(_boundary_segments(partition))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
