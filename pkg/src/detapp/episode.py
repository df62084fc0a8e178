"""Patch-grid samples, region boxes and episodes.

A sample is an H x W grid of d-dimensional patch features. Mean pooling over
a box of patches stands in for running a frozen backbone over an image crop,
so every downstream quantity is computed from pooled vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BoxOutOfBounds, SideTooLarge, ZeroVector

EPS_NORM = 1e-12

CLEAN, ID_NOISE, OOD_NOISE = "clean", "id", "ood"
NOISE_FLAGS = (CLEAN, ID_NOISE, OOD_NOISE)
OOD_LABEL = 0  # query label used for samples outside the C task classes


class RegionBox(NamedTuple):
    """Half-open patch-index box ``[row0, row1) x [col0, col1)``."""

    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    def check(self, H: int, W: int) -> None:
        if not (0 <= self.row0 < self.row1 <= H and 0 <= self.col0 < self.col1 <= W):
            raise BoxOutOfBounds(f"{tuple(self)} does not fit a {H}x{W} grid")


@dataclass(eq=False)
class PatchGrid:
    patches: np.ndarray  # (H, W, d)
    sample_id: int
    # evaluation-only: True where a patch comes from the object, False for clutter
    object_mask: np.ndarray | None = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 3 or self.patches.shape[0] < 1 or self.patches.shape[1] < 1:
            raise ValueError(f"patches must be (H, W, d) with H, W >= 1, got {self.patches.shape}")

    @property
    def H(self) -> int:
        return self.patches.shape[0]

    @property
    def W(self) -> int:
        return self.patches.shape[1]

    @property
    def d(self) -> int:
        return self.patches.shape[2]

    def full_box(self) -> RegionBox:
        return RegionBox(0, 0, self.H, self.W)

    def __eq__(self, other):
        if not isinstance(other, PatchGrid):
            return NotImplemented
        return (self.sample_id == other.sample_id
                and self.patches.shape == other.patches.shape
                and np.array_equal(self.patches, other.patches))


@dataclass(eq=False)
class Sample:
    grid: PatchGrid
    label: int  # 1..C, or OOD_LABEL for OOD queries
    noise: str = CLEAN

    @property
    def id(self) -> int:
        return self.grid.sample_id

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return self.grid == other.grid and self.label == other.label and self.noise == other.noise


@dataclass(eq=False)
class Episode:
    support: list[Sample]
    query: list[Sample]
    C: int
    K: int
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        g = self.support[0].grid
        return g.H, g.W, g.d

    @property
    def noise_truth(self) -> dict[int, str]:
        return {s.id: s.noise for s in self.support + self.query}

    def support_by_id(self) -> dict[int, Sample]:
        return {s.id: s for s in self.support}

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.C == other.C and self.K == other.K and self.meta == other.meta
                and self.support == other.support and self.query == other.query)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise ZeroVector("cosine of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def pool_region(grid: PatchGrid, box: RegionBox) -> np.ndarray:
    box = RegionBox(*box)
    box.check(grid.H, grid.W)
    return grid.patches[box.row0:box.row1, box.col0:box.col1].mean(axis=(0, 1))


def image_feature(grid: PatchGrid) -> np.ndarray:
    return pool_region(grid, grid.full_box())


def default_side(H: int, W: int) -> int:
    return -(-min(H, W) // 2)


def crop_random_regions(grid: PatchGrid, k: int, side: int, rng) -> list[tuple[RegionBox, np.ndarray]]:
    """Draw ``k`` side x side boxes uniformly over valid offsets.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed. Draws depend only
    on the grid dimensions, so equal seeds give equal boxes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if side < 1 or side > min(grid.H, grid.W):
        raise SideTooLarge(f"side {side} does not fit a {grid.H}x{grid.W} grid")
    rng = np.random.default_rng(rng)
    rows = rng.integers(0, grid.H - side + 1, size=k)
    cols = rng.integers(0, grid.W - side + 1, size=k)
    out = []
    for r, c in zip(rows, cols):
        box = RegionBox(int(r), int(c), int(r) + side, int(c) + side)
        out.append((box, pool_region(grid, box)))
    return out


def integral_image(grid: PatchGrid) -> np.ndarray:
    """Summed-area table with a zero first row and column, shape (H+1, W+1, d)."""
    S = np.zeros((grid.H + 1, grid.W + 1, grid.d))
    S[1:, 1:] = grid.patches.cumsum(axis=0).cumsum(axis=1)
    return S


def pool_boxes(tables: np.ndarray, owner, rows, cols, side: int) -> np.ndarray:
    """Mean features of many side x side boxes at once.

    ``tables`` stacks integral images (n, H+1, W+1, d); box i lies in grid
    ``owner[i]`` with top-left corner ``(rows[i], cols[i])``.
    """
    r1, c1 = rows + side, cols + side
    total = (tables[owner, r1, c1] - tables[owner, rows, c1]
             - tables[owner, r1, cols] + tables[owner, rows, cols])
    return total / float(side * side)
