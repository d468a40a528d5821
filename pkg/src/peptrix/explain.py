"""Attention-map exports: CSV tables, SVG heatmaps and residue rankings."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .encoders import AttentionCoefficients
from .fusion import AttentionMap

DECIMALS = 6
MAX_SVG_DIM = 512


def round_rows(weights: np.ndarray, decimals: int = DECIMALS) -> np.ndarray:
    """Round to ``decimals`` places per row, keeping each row's rounded sum.

    Largest-remainder rounding: every cell moves by less than one unit in the
    last place and each row total equals its own rounded total, so exported
    rows of a stochastic matrix still sum to 1.
    """
    unit = 10 ** decimals
    scaled = np.asarray(weights, dtype=np.float64) * unit
    floor = np.floor(scaled)
    out = floor.copy()
    for i in range(scaled.shape[0]):
        target = int(round(scaled[i].sum()))
        short = target - int(floor[i].sum())
        if short > 0:
            # stable sort keeps ties in column order
            order = np.argsort(-(scaled[i] - floor[i]), kind="stable")
            out[i, order[:short]] += 1
    return out / unit


def format_attention_csv(amap: AttentionMap) -> str:
    values = round_rows(amap.weights)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"{amap.query}\\{amap.key}", *amap.col_labels])
    for label, row in zip(amap.row_labels, values):
        writer.writerow([label, *(f"{v:.{DECIMALS}f}" for v in row)])
    return buf.getvalue()


def export_attention_csv(amap: AttentionMap, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_attention_csv(amap))


def read_attention_csv(path: str | os.PathLike) -> AttentionMap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: attention CSV needs a header and at least one row")
    corner, *cols = rows[0]
    query, _, key = corner.partition("\\")
    labels = [r[0] for r in rows[1:]]
    weights = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return AttentionMap(weights, query or "seq", key or "struct", tuple(labels), tuple(cols))


@dataclass
class HeatmapSpec:
    map: AttentionMap
    title: str = ""
    cell: int = 14

    def __post_init__(self) -> None:
        n_q, n_k = self.map.shape
        if len(self.map.row_labels) != n_q or len(self.map.col_labels) != n_k:
            raise ValueError("label counts do not match the matrix")

    @property
    def vmin(self) -> float:
        return float(self.map.weights.min())

    @property
    def vmax(self) -> float:
        return float(self.map.weights.max())


# linear grayscale: black is the smallest value, white the largest
_DARK = np.array([0.0, 0.0, 0.0])
_BRIGHT = np.array([255.0, 255.0, 255.0])


def _color(value: float, vmin: float, vmax: float) -> str:
    t = 0.5 if vmax == vmin else (value - vmin) / (vmax - vmin)
    r, g, b = np.rint(_DARK + t * (_BRIGHT - _DARK)).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap_svg(spec: HeatmapSpec, path: str | os.PathLike | None = None) -> str:
    """Write (and return) a standalone SVG with one rect per cell."""
    w = spec.map.weights
    n_q, n_k = w.shape
    if n_q > MAX_SVG_DIM or n_k > MAX_SVG_DIM:
        raise ValueError(f"heatmap {n_q} x {n_k} exceeds {MAX_SVG_DIM} x {MAX_SVG_DIM}")
    c = spec.cell
    left, top = 48, 48 if spec.title else 32
    width, height = left + n_k * c + 8, top + n_q * c + 8
    vmin, vmax = spec.vmin, spec.vmax
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="{max(c - 5, 6)}">'
    ]
    if spec.title:
        out.append(f'<text x="{left}" y="14">{escape(spec.title)}</text>')
    for j, label in enumerate(spec.map.col_labels):
        x = left + j * c + c / 2
        out.append(
            f'<text class="col" x="{x:g}" y="{top - 4}" text-anchor="start" '
            f'transform="rotate(-60 {x:g} {top - 4})">{escape(label)}</text>'
        )
    for i, label in enumerate(spec.map.row_labels):
        out.append(f'<text class="row" x="{left - 4}" y="{top + i * c + c - 3}" text-anchor="end">{escape(label)}</text>')
        for j in range(n_k):
            out.append(
                f'<rect x="{left + j * c}" y="{top + i * c}" width="{c}" height="{c}" '
                f'fill="{_color(w[i, j], vmin, vmax)}"><title>{w[i, j]:.6f}</title></rect>'
            )
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg


def top_residues(amap: AttentionMap, k: int) -> list[tuple[str, float]]:
    """Key residues ranked by total attention received (column sums).

    Ties go to the lower column index.
    """
    n_k = amap.shape[1]
    if not 1 <= k <= n_k:
        raise ValueError(f"k must lie in [1, {n_k}], got {k}")
    scores = amap.weights.sum(axis=0)
    order = sorted(range(n_k), key=lambda j: (-scores[j], j))
    return [(amap.col_labels[j], float(scores[j])) for j in order[:k]]


def gat_attention_map(coeffs: AttentionCoefficients, labels: tuple[str, ...] = (), head: int = 0) -> AttentionMap:
    """GAT coefficients as a dense residue x residue map (zeros off-graph)."""
    return AttentionMap(coeffs.alpha[head], "struct", "struct", labels, labels)
