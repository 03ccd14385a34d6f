"""Asymmetric circle grid geometry."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class PatternSpec:
    """An r x c asymmetric circle grid.

    ``rows`` circles per column, ``cols`` columns; odd columns are shifted by
    half a row. ``diagonal_spacing`` is the center distance between diagonal
    neighbours (mm), which is also the nearest-neighbour distance.
    """

    rows: int
    cols: int
    diagonal_spacing: float

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if not self.diagonal_spacing > 0:
            raise ValueError("diagonal_spacing must be positive")

    @property
    def M(self) -> int:
        return self.rows * self.cols

    @property
    def pitch(self) -> float:
        """Half the same-row spacing: diagonal_spacing / sqrt(2)."""
        return self.diagonal_spacing / math.sqrt(2.0)

    def lattice_indices(self) -> np.ndarray:
        """(M, 2) integer (column, half-row) index of each circle, canonical order.

        Circle k = i_col * rows + i_row sits at column ``i_col`` and half-row
        ``2 * i_row + i_col % 2``.
        """
        c = np.repeat(np.arange(self.cols), self.rows)
        r = np.tile(np.arange(self.rows), self.cols)
        return np.stack([c, 2 * r + c % 2], axis=1)

    def scaled(self, factor: float) -> "PatternSpec":
        return PatternSpec(self.rows, self.cols, self.diagonal_spacing * factor)


def pattern_object_points(spec: PatternSpec) -> np.ndarray:
    """(M, 3) circle centers in the pattern frame (mm, z = 0), canonical order.

    Point (i_row, i_col) is at x = i_col * s, y = (2 i_row + i_col % 2) * s
    with s = diagonal_spacing / sqrt(2); index = i_col * rows + i_row.
    """
    idx = spec.lattice_indices().astype(float) * spec.pitch
    return np.column_stack([idx, np.zeros(spec.M)])
