"""Regular verification grids and hierarchical sweeps over vertex blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..spectrl import Box


class GridTooLargeError(MemoryError):
    pass


@dataclass(frozen=True)
class Discretization:
    """Grid over ``space`` whose vertices are within L1 distance ``tau`` of every state.

    Cells have side ``h_i <= 2 tau / d``, so any point of a cell is within
    ``sum(h_i) / 2 <= tau`` of one of the cell's vertices.
    """

    space: Box
    tau: float
    counts: tuple[int, ...]   # cells per dimension

    @classmethod
    def with_mesh(cls, space: Box, tau: float, budget: float = 5e7) -> "Discretization":
        if tau <= 0:
            raise ValueError("mesh must be positive")
        d = space.dim
        target = 2.0 * tau / d
        counts = tuple(max(1, math.ceil(w / target - 1e-12)) for w in space.widths)
        nverts = float(np.prod([c + 1 for c in counts]))
        if nverts > budget:
            raise GridTooLargeError(
                f"mesh {tau:g} needs {nverts:.3g} grid vertices (budget {budget:.3g}); "
                f"use a larger mesh")
        return cls(space, float(tau), counts)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def h(self) -> np.ndarray:
        return self.space.widths / np.array(self.counts)

    @property
    def n_vertices(self) -> int:
        return int(np.prod([c + 1 for c in self.counts]))

    def vertex(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.array(self.space.lo) + idx * self.h

    def vertices(self) -> np.ndarray:
        axes = [np.linspace(l, u, c + 1) for l, u, c in zip(self.space.lo, self.space.hi, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def nearest_vertex(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.rint((x - np.array(self.space.lo)) / self.h)
        idx = np.clip(idx, 0, np.array(self.counts))
        return self.vertex(idx)

    def covering_radius(self) -> float:
        return float(self.h.sum() / 2.0)


def split_blocks(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Halve integer index blocks ``[lo, hi]`` (inclusive) along their longest axis."""
    ext = hi - lo
    ax = np.argmax(ext, axis=1)
    rows = np.arange(len(lo))
    mid = lo[rows, ax] + ext[rows, ax] // 2
    lo1, hi1 = lo.copy(), hi.copy()
    hi1[rows, ax] = mid
    lo2, hi2 = lo.copy(), hi.copy()
    lo2[rows, ax] = mid + 1
    return np.concatenate([lo1, lo2]), np.concatenate([hi1, hi2])


def cell_blocks_touching(disc: Discretization, boxes_lo: np.ndarray, boxes_hi: np.ndarray):
    """Cell-index blocks (inclusive) covering every cell that meets a given box."""
    lo0 = np.array(disc.space.lo)
    h = disc.h
    top = np.array(disc.counts) - 1
    out_lo, out_hi = [], []
    for blo, bhi in zip(boxes_lo, boxes_hi):
        if np.any(bhi < disc.space.lo) or np.any(blo > disc.space.hi):
            continue
        # cell k spans [lo0 + k h, lo0 + (k+1) h]; closed intersection
        a = np.floor((blo - lo0) / h - 1e-12).astype(np.int64)
        a = np.where(lo0 + (a + 1) * h < blo, a + 1, a)
        b = np.ceil((bhi - lo0) / h + 1e-12).astype(np.int64) - 1
        b = np.where(lo0 + b * h > bhi, b - 1, b)
        a = np.clip(np.maximum(a, 0), 0, top)
        b = np.clip(b, 0, top)
        if np.any(b < a):
            continue
        out_lo.append(a)
        out_hi.append(b)
    d = disc.dim
    if not out_lo:
        return np.zeros((0, d), np.int64), np.zeros((0, d), np.int64)
    return np.array(out_lo), np.array(out_hi)


def cell_box(disc: Discretization, lo_idx, hi_idx):
    """State-space box spanned by cells ``lo_idx..hi_idx``."""
    lo0 = np.array(disc.space.lo)
    return lo0 + lo_idx * disc.h, lo0 + (hi_idx + 1) * disc.h


def vertex_neighbourhood(disc: Discretization, lo_idx, hi_idx):
    """Union of the cells adjacent to vertices ``lo_idx..hi_idx``, clipped to the space."""
    lo0 = np.array(disc.space.lo)
    a = lo0 + (lo_idx - 1) * disc.h
    b = lo0 + (hi_idx + 1) * disc.h
    return np.maximum(a, disc.space.lo), np.minimum(b, disc.space.hi)
