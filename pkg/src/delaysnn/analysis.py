"""Spatio-temporal receptive fields and their spatial autocorrelation.

A hidden neuron's panel is a ``[channels x (T_d + 1)]`` grid holding each
input synapse's effective weight at its (rounded) delay. An output neuron's
receptive field sums the panels of the hidden neurons it listens to, scaled
by the hidden-to-output weight and shifted right by the hidden-to-output
delay, giving a ``[channels x (2 T_d + 1)]`` grid.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateFieldError
from .network import NetState

log = logging.getLogger(__name__)

QUEEN_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


@dataclass
class RFGrid:
    values: np.ndarray  # [C, 2 * T_d + 1]
    t_d_max: int

    def __post_init__(self):
        if self.values.shape[1] != 2 * self.t_d_max + 1:
            raise ValueError(f"RF width must be 2*T_d+1 = {2 * self.t_d_max + 1}, "
                             f"got {self.values.shape[1]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("RF grid has non-finite entries")


@dataclass
class MoranResult:
    i_value: float
    n_cells: int
    sum_weights: float


def _delay_bins(delay) -> np.ndarray:
    # round half to even
    return np.rint(delay).astype(np.int64)


def hidden_panels(net: NetState) -> np.ndarray:
    """Panels for every hidden neuron at once: ``[n_hidden, C, T_d + 1]``."""
    layer = net.layers[0]
    t_d = net.config.t_d_max
    w = layer.weights().astype(np.float64)
    h_idx, c_idx = np.nonzero(w)
    panels = np.zeros(w.shape + (t_d + 1,))
    np.add.at(panels, (h_idx, c_idx, _delay_bins(layer.delay[h_idx, c_idx])), w[h_idx, c_idx])
    return panels


def hidden_panel(net: NetState, h: int) -> np.ndarray:
    if not 0 <= h < net.config.n_hidden:
        raise IndexError(f"hidden index {h} out of range")
    return hidden_panels(net)[h]


def output_rf(net: NetState, o: int, panels: np.ndarray | None = None) -> RFGrid:
    if not 0 <= o < net.config.n_out:
        raise IndexError(f"output index {o} out of range")
    if panels is None:
        panels = hidden_panels(net)
    t_d = net.config.t_d_max
    layer = net.layers[1]
    w_out = layer.weights()[o].astype(np.float64)
    shifts = _delay_bins(layer.delay[o])
    rf = np.zeros((net.config.n_in, 2 * t_d + 1))
    for h in np.flatnonzero(w_out):
        s = shifts[h]
        rf[:, s:s + t_d + 1] += w_out[h] * panels[h]
    return RFGrid(values=rf, t_d_max=t_d)


def queen_neighbor_counts(shape) -> np.ndarray:
    rows, cols = shape
    r = np.minimum(np.arange(rows), 1) + np.minimum(rows - 1 - np.arange(rows), 1) + 1
    c = np.minimum(np.arange(cols), 1) + np.minimum(cols - 1 - np.arange(cols), 1) + 1
    return np.outer(r, c) - 1


def _neighbor_sum(z: np.ndarray) -> np.ndarray:
    """For every cell, the sum of ``z`` over its queen neighbours."""
    padded = np.pad(z, 1)
    rows, cols = z.shape
    total = np.zeros_like(z)
    for dr, dc in QUEEN_OFFSETS:
        total += padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
    return total


def morans_i(grid, row_standardize: bool = False) -> MoranResult:
    """Global Moran's I with queen-contiguity (8-neighbour) weights.

    Binary weights by default; ``row_standardize`` divides each cell's
    weights by its neighbour count.
    """
    x = np.asarray(grid.values if isinstance(grid, RFGrid) else grid, dtype=np.float64)
    if x.ndim != 2 or x.size < 2:
        raise DegenerateFieldError(f"Moran's I needs a 2-D grid with >= 2 cells, got {x.shape}")
    z = x - x.mean()
    denom = float(np.sum(z * z))
    if denom == 0.0:
        raise DegenerateFieldError("grid has zero variance; Moran's I is undefined")
    counts = queen_neighbor_counts(x.shape)
    if row_standardize:
        with np.errstate(divide="ignore", invalid="ignore"):
            row_w = np.where(counts > 0, 1.0 / counts, 0.0)
        cross = float(np.sum(row_w * z * _neighbor_sum(z)))
        sum_w = float(np.count_nonzero(counts))
    else:
        cross = float(np.sum(z * _neighbor_sum(z)))
        sum_w = float(counts.sum())
    if sum_w == 0:
        raise DegenerateFieldError("grid has no neighbouring cells")
    return MoranResult(i_value=x.size / sum_w * cross / denom, n_cells=x.size, sum_weights=sum_w)


def rf_pixels(values) -> np.ndarray:
    """RGB bytes ``[rows, cols, 3]``: red for positive, blue for negative, alpha = |v|/max|v|."""
    v = np.asarray(values, dtype=np.float64)
    peak = np.abs(v).max() if v.size else 0.0
    alpha = np.abs(v) / peak if peak > 0 else np.zeros_like(v)
    color = np.where(v[..., None] >= 0, np.array([255.0, 0.0, 0.0]), np.array([0.0, 0.0, 255.0]))
    blended = alpha[..., None] * color + (1.0 - alpha[..., None]) * 255.0
    return np.floor(blended + 0.5).astype(np.uint8)


def encode_ppm(values) -> bytes:
    pixels = rf_pixels(values)
    rows, cols = pixels.shape[:2]
    return f"P6\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def render_rf(grid, path) -> Path:
    """Write a binary PPM, one pixel per cell, channel 0 in the top row."""
    values = grid.values if isinstance(grid, RFGrid) else grid
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot render non-finite grid")
    path = Path(path)
    path.write_bytes(encode_ppm(values))
    return path


@dataclass
class AnalysisReport:
    morans: list  # float per class, None where undefined
    mean: float
    argmax: int | None
    argmin: int | None


def analyze_network(net: NetState, out_dir=None, row_standardize: bool | None = None) -> AnalysisReport:
    """Moran's I for every output class; optionally writes CSV and one PPM per class."""
    if row_standardize is None:
        row_standardize = net.config.moran_row_standardize
    panels = hidden_panels(net)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    values = []
    for o in range(net.config.n_out):
        rf = output_rf(net, o, panels)
        if out_dir is not None:
            render_rf(rf, out_dir / f"rf_class_{o}.ppm")
        try:
            values.append(morans_i(rf, row_standardize).i_value)
        except DegenerateFieldError:
            log.warning("receptive field of class %d is degenerate; Moran's I undefined", o)
            values.append(None)

    defined = [(v, k) for k, v in enumerate(values) if v is not None]
    mean = float(np.mean([v for v, _ in defined])) if defined else math.nan
    report = AnalysisReport(
        morans=values, mean=mean,
        argmax=max(defined)[1] if defined else None,
        argmin=min(defined)[1] if defined else None,
    )
    if out_dir is not None:
        with open(out_dir / "morans_i.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "morans_i"])
            for k, v in enumerate(values):
                writer.writerow([k, "undefined" if v is None else repr(v)])
            writer.writerow(["mean", repr(mean)])
    return report
