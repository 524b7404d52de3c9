"""View geometry and cross-view feature correspondence.

Coordinates are expressed on the coarse (MS / label) source grid; the
high-resolution crop is the same box scaled by the resolution ratio.  A
view is produced by crop -> resize -> optional horizontal flip -> ``k``
counter-clockwise quarter turns (``np.rot90`` convention), so every step
is exactly invertible on the pixel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ViewGeometry:
    crop_box: tuple[int, int, int, int]  # (x0, y0, w, h) in source pixels
    out_size: int
    flip_h: bool = False
    rotation_quarter_turns: int = 0

    def __post_init__(self):
        x0, y0, w, h = self.crop_box
        if w <= 0 or h <= 0:
            raise ValueError(f"crop box must have positive extent, got {self.crop_box}")
        if x0 < 0 or y0 < 0:
            raise ValueError(f"crop box origin must be non-negative, got {self.crop_box}")
        if self.rotation_quarter_turns not in (0, 1, 2, 3):
            raise ValueError("rotation_quarter_turns must be in {0, 1, 2, 3}")

    @property
    def scale(self) -> tuple[float, float]:
        """Output size over crop size, (rows, cols)."""
        _, _, w, h = self.crop_box
        return self.out_size / h, self.out_size / w

    @classmethod
    def identity(cls, size: int) -> "ViewGeometry":
        return cls((0, 0, size, size), size)

    def inside(self, source_size: int) -> bool:
        x0, y0, w, h = self.crop_box
        return x0 + w <= source_size and y0 + h <= source_size

    # -- normalized view coords (u = row, v = col) in [0, 1) ---------------

    def view_to_source(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        for _ in range(self.rotation_quarter_turns):
            u, v = v, 1.0 - u
        if self.flip_h:
            v = 1.0 - v
        x0, y0, w, h = self.crop_box
        return y0 + u * h, x0 + v * w

    def source_to_view(self, y, x):
        x0, y0, w, h = self.crop_box
        u = (np.asarray(y, dtype=np.float64) - y0) / h
        v = (np.asarray(x, dtype=np.float64) - x0) / w
        if self.flip_h:
            v = 1.0 - v
        for _ in range(self.rotation_quarter_turns):
            u, v = 1.0 - v, u
        return u, v


def cell_centers(grid: tuple[int, int]):
    h, w = grid
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (rows.ravel() + 0.5) / h, (cols.ravel() + 0.5) / w


def correspondence(geom_a: ViewGeometry, geom_b: ViewGeometry, grid, grid_b=None):
    """Pairs ``(index_a, index_b)`` of flattened feature cells at one geo-location.

    The centre of every cell of view ``a`` is mapped back to the source and
    then forward into view ``b``; it is paired with the ``b`` cell whose
    footprint contains it.  Cells of ``a`` that fall outside ``b`` are
    dropped, so disjoint crops give an empty list.
    """
    grid_b = grid if grid_b is None else grid_b
    hb, wb = grid_b
    u, v = cell_centers(grid)
    ub, vb = geom_b.source_to_view(*geom_a.view_to_source(u, v))
    # guard against centres landing exactly on a cell edge through rounding
    ub = np.round(ub, 12)
    vb = np.round(vb, 12)
    inside = (ub >= 0) & (ub < 1) & (vb >= 0) & (vb < 1)
    rows = np.floor(ub[inside] * hb).astype(int)
    cols = np.floor(vb[inside] * wb).astype(int)
    idx_a = np.nonzero(inside)[0]
    return [(int(a), int(r * wb + c)) for a, r, c in zip(idx_a, rows, cols)]


def correspondence_array(geom_a, geom_b, grid, grid_b=None) -> np.ndarray:
    pairs = correspondence(geom_a, geom_b, grid, grid_b)
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
