"""Static figures for manifold grids and connection solutions.

Grids are drawn as polylines, one chain per crossing index and
parameter sign, broken wherever the segment filters would refuse to
connect the points: invalid rows, spacing jumps over the rolling
median, and angle wraps in the Delaunay view. Figures render to SVG
with the run's configuration hash in the document metadata, and the
id salt is pinned so identical runs produce identical files.
"""

from __future__ import annotations

import math

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import pcrtbp
from .connections import DISCONTINUITY_FACTOR, DISCONTINUITY_WINDOW
from .exceptions import DomainError
from .manifolds import ManifoldGrid
from .pcrtbp import SystemModel

COORD_CHOICES = ("xy", "Lg")

TWO_PI = 2.0 * math.pi

#: styling per overlay slot; cycles when more grids are drawn
GRID_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:orange",
               "tab:purple")


def _coords_of(states: np.ndarray, model: SystemModel,
               coords: str) -> np.ndarray:
    """(n, 2) plot coordinates of valid states; angles wrapped."""
    if coords == "xy":
        return states[:, :2].copy()
    out = np.empty((states.shape[0], 2))
    for i, st in enumerate(states):
        try:
            dl = pcrtbp.delaunay(model, st)
        except DomainError:
            # hyperbolic osculating motion has no Delaunay image; the
            # chunker breaks the polyline at non-finite points
            out[i] = np.nan
            continue
        out[i, 0] = dl.g % TWO_PI
        out[i, 1] = dl.L
    return out


def _chunks(grid: ManifoldGrid, model: SystemModel,
            coords: str) -> list[np.ndarray]:
    """Polyline pieces ((n, 2) arrays) honoring the segment filters."""
    pieces: list[np.ndarray] = []
    ks = np.unique(grid.k)
    for k in ks:
        for half in (grid.s > 0.0, grid.s < 0.0):
            rows = np.nonzero((grid.k == k) & half)[0]
            if rows.size < 2:
                continue
            pts = np.full((rows.size, 2), np.nan)
            ok = grid.valid[rows]
            pts[ok] = _coords_of(grid.states[rows[ok]], model, coords)
            current: list[np.ndarray] = []
            window: list[float] = []
            for t in range(rows.size):
                if not ok[t] or not np.all(np.isfinite(pts[t])):
                    _flush(pieces, current)
                    continue
                if current:
                    prev = current[-1]
                    length = math.hypot(pts[t, 0] - prev[0],
                                        pts[t, 1] - prev[1])
                    wrapped = (coords == "Lg"
                               and abs(pts[t, 0] - prev[0]) > math.pi)
                    jump = (window and length
                            > DISCONTINUITY_FACTOR * _median(window))
                    if wrapped or jump:
                        _flush(pieces, current)
                    else:
                        window.append(length)
                        if len(window) > DISCONTINUITY_WINDOW:
                            window.pop(0)
                current.append(pts[t])
            _flush(pieces, current)
    return pieces


def _median(values: list[float]) -> float:
    return float(np.median(values))


def _flush(pieces: list[np.ndarray], current: list[np.ndarray]) -> None:
    if len(current) >= 2:
        pieces.append(np.vstack(current))
    current.clear()


def render_figure(grids: list[tuple[ManifoldGrid, SystemModel, str]],
                  path, coords: str = "xy",
                  solutions: list[dict] | None = None,
                  config_hash: str = "") -> None:
    """Draw grids (and optional solution markers) into one SVG file.

    grids is a list of (grid, model, label); each gets its own color.
    solutions are connection records as serialized by the search; the
    marker lands at the solution state's projection into the chosen
    coordinates.
    """
    if coords not in COORD_CHOICES:
        raise DomainError(f"coords {coords!r} not one of {COORD_CHOICES}")
    plt.rcParams["svg.hashsalt"] = config_hash or "apsidal"
    fig, ax = plt.subplots(figsize=(7.0, 5.6))
    try:
        for slot, (grid, model, label) in enumerate(grids):
            color = GRID_COLORS[slot % len(GRID_COLORS)]
            first = True
            for piece in _chunks(grid, model, coords):
                ax.plot(piece[:, 0], piece[:, 1], color=color,
                        linewidth=0.7, alpha=0.85,
                        label=label if first else None)
                first = False
        if solutions:
            states = np.array([sol["state"] for sol in solutions])
            model = grids[0][1] if grids else None
            if model is None:
                raise DomainError("solution markers need a grid for "
                                  "the model context")
            pts = _coords_of(states, model, coords)
            ax.plot(pts[:, 0], pts[:, 1], linestyle="none", marker="*",
                    markersize=9, color="black", zorder=5,
                    label="connections")
        if coords == "xy":
            ax.set_xlabel("x")
            ax.set_ylabel("y")
            ax.set_aspect("equal", adjustable="datalim")
        else:
            ax.set_xlabel("g")
            ax.set_ylabel("L")
            ax.set_xlim(0.0, TWO_PI)
        if grids or solutions:
            ax.legend(loc="best", fontsize=8)
        ax.grid(True, alpha=0.25)
        fig.tight_layout()
        fig.savefig(path, format="svg",
                    metadata={"Date": None,
                              "Description":
                                  f"config_hash={config_hash}"})
    finally:
        plt.close(fig)
