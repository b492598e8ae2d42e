"""Built-in A-Z glyph bitmaps, rasterized from stroke outlines.

Strokes live in a 4 x 6 design box (y up). Each glyph is rasterized once
onto a 32 x 48 grid of square cells; a cell is "on" when its centre lies
within ``STROKE_HALF_WIDTH`` of a stroke.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

STROKE_HALF_WIDTH = 0.45
GRID_COLS, GRID_ROWS = 32, 48
X_RANGE = (-0.5, 4.5)
Y_RANGE = (-0.75, 6.75)

_O = [(1, 0), (0, 1), (0, 5), (1, 6), (3, 6), (4, 5), (4, 1), (3, 0), (1, 0)]
_P = [(0, 0), (0, 6), (3, 6), (4, 5), (4, 4), (3, 3), (0, 3)]

STROKES: dict[str, list[list[tuple[float, float]]]] = {
    "A": [[(0, 0), (2, 6), (4, 0)], [(0.9, 2.6), (3.1, 2.6)]],
    "B": [
        [(0, 0), (0, 6), (3, 6), (4, 5.2), (4, 3.8), (3, 3), (0, 3)],
        [(3, 3), (4, 2.2), (4, 0.8), (3, 0), (0, 0)],
    ],
    "C": [[(4, 5), (3, 6), (1, 6), (0, 5), (0, 1), (1, 0), (3, 0), (4, 1)]],
    "D": [[(0, 0), (0, 6), (2.5, 6), (4, 4.5), (4, 1.5), (2.5, 0), (0, 0)]],
    "E": [[(4, 6), (0, 6), (0, 0), (4, 0)], [(0, 3), (3, 3)]],
    "F": [[(4, 6), (0, 6), (0, 0)], [(0, 3), (3, 3)]],
    "G": [[(4, 5), (3, 6), (1, 6), (0, 5), (0, 1), (1, 0), (3, 0), (4, 1), (4, 3), (2, 3)]],
    "H": [[(0, 0), (0, 6)], [(4, 0), (4, 6)], [(0, 3), (4, 3)]],
    "I": [[(2, 0), (2, 6)]],
    "J": [[(4, 6), (4, 1), (3, 0), (1, 0), (0, 1)]],
    "K": [[(0, 0), (0, 6)], [(4, 6), (0, 2.5)], [(1.4, 3.6), (4, 0)]],
    "L": [[(0, 6), (0, 0), (4, 0)]],
    "M": [[(0, 0), (0, 6), (2, 3), (4, 6), (4, 0)]],
    "N": [[(0, 0), (0, 6), (4, 0), (4, 6)]],
    "O": [_O],
    "P": [_P],
    "Q": [_O, [(2.5, 1.5), (4, 0)]],
    "R": [_P, [(2, 3), (4, 0)]],
    "S": [[(4, 5), (3, 6), (1, 6), (0, 5), (0, 4), (1, 3), (3, 3), (4, 2), (4, 1), (3, 0), (1, 0), (0, 1)]],
    "T": [[(0, 6), (4, 6)], [(2, 6), (2, 0)]],
    "U": [[(0, 6), (0, 1), (1, 0), (3, 0), (4, 1), (4, 6)]],
    "V": [[(0, 6), (2, 0), (4, 6)]],
    "W": [[(0, 6), (1, 0), (2, 4), (3, 0), (4, 6)]],
    "X": [[(0, 0), (4, 6)], [(0, 6), (4, 0)]],
    "Y": [[(0, 6), (2, 3), (4, 6)], [(2, 3), (2, 0)]],
    "Z": [[(0, 6), (4, 6), (0, 0), (4, 0)]],
}


def _segment_distance(px: np.ndarray, py: np.ndarray, a, b) -> np.ndarray:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    s = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + s * dx), py - (ay + s * dy))


@lru_cache(maxsize=None)
def bitmap(glyph: str) -> np.ndarray:
    """Boolean [GRID_ROWS, GRID_COLS] mask; row 0 is the bottom row."""
    cell = (X_RANGE[1] - X_RANGE[0]) / GRID_COLS
    xs = X_RANGE[0] + (np.arange(GRID_COLS) + 0.5) * cell
    ys = Y_RANGE[0] + (np.arange(GRID_ROWS) + 0.5) * cell
    px, py = np.meshgrid(xs, ys)
    dist = np.full(px.shape, np.inf)
    for stroke in STROKES[glyph]:
        for a, b in zip(stroke[:-1], stroke[1:]):
            dist = np.minimum(dist, _segment_distance(px, py, a, b))
    mask = dist <= STROKE_HALF_WIDTH
    mask.flags.writeable = False
    return mask


def cell_size() -> float:
    return (X_RANGE[1] - X_RANGE[0]) / GRID_COLS
