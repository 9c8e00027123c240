"""Lattice state, neighborhoods and the geometric queries built on them."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

import numba
import numpy as np


class Neighborhood(enum.Enum):
    VON_NEUMANN = "von_neumann"
    MOORE = "moore"

    @property
    def offsets(self) -> np.ndarray:
        """(k, 2) array of (drow, dcol) offsets, symmetric under negation."""
        return _OFFSETS[self]

    @classmethod
    def parse(cls, value) -> "Neighborhood":
        if isinstance(value, Neighborhood):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"4": cls.VON_NEUMANN, "vonneumann4": cls.VON_NEUMANN,
                   "von_neumann4": cls.VON_NEUMANN, "8": cls.MOORE, "moore8": cls.MOORE}
        if key in aliases:
            return aliases[key]
        return cls(key)


_OFFSETS = {
    Neighborhood.VON_NEUMANN: np.array([(-1, 0), (0, -1), (0, 1), (1, 0)], dtype=np.int64),
    Neighborhood.MOORE: np.array(
        [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.int64
    ),
}

DEFAULT_NEIGHBORHOOD = Neighborhood.MOORE


class LatticeError(ValueError):
    pass


@dataclass(eq=False)
class LatticeState:
    """A 2D grid of cell ids plus the cell -> type table.

    ``cell_types[c]`` is the type of cell ``c``; id 0 is the medium and
    always has type 0. Cells may be registered but absent from the grid
    (volume 0).
    """

    grid: np.ndarray
    cell_types: np.ndarray

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.int64)
        self.cell_types = np.ascontiguousarray(self.cell_types, dtype=np.int64)
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise LatticeError(f"grid must be a non-empty 2D array, got shape {self.grid.shape}")
        if self.cell_types.ndim != 1 or self.cell_types.size == 0:
            raise LatticeError("cell_types must be a non-empty 1D array indexed by cell id")
        if self.cell_types[0] != 0:
            raise LatticeError("medium (cell 0) must have type 0")
        if (self.cell_types[1:] < 1).any():
            raise LatticeError("non-medium cells must have a type >= 1")
        if self.grid.min() < 0 or self.grid.max() >= self.cell_types.size:
            raise LatticeError("grid holds cell ids without a registered type")

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def n_sites(self) -> int:
        return self.grid.size

    @property
    def n_cells(self) -> int:
        """Number of registered non-medium cells."""
        return self.cell_types.size - 1

    @property
    def n_types(self) -> int:
        return int(self.cell_types.max()) + 1

    def site_types(self) -> np.ndarray:
        return self.cell_types[self.grid]

    def copy(self) -> "LatticeState":
        return LatticeState(self.grid.copy(), self.cell_types.copy())

    def relabel(self, perm) -> "LatticeState":
        """Rename cell ``c`` to ``perm[c]``; ``perm[0]`` must be 0. Types travel with cells."""
        perm = np.asarray(perm, dtype=np.int64)
        if perm.shape != self.cell_types.shape or perm[0] != 0:
            raise LatticeError("perm must be a permutation of cell ids fixing 0")
        types = np.empty_like(self.cell_types)
        types[perm] = self.cell_types
        return LatticeState(perm[self.grid], types)

    def with_types(self, cell_types) -> "LatticeState":
        return LatticeState(self.grid.copy(), np.asarray(cell_types).copy())

    def __eq__(self, other):
        if not isinstance(other, LatticeState):
            return NotImplemented
        return (
            self.grid.shape == other.grid.shape
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.cell_types, other.cell_types)
        )

    def __repr__(self):
        return f"LatticeState({self.height}x{self.width}, cells={self.n_cells}, types={self.n_types})"


def one_hot_encode(state: LatticeState, include_medium: bool = True) -> np.ndarray:
    """Per-cell occupancy planes, shape (n_planes, height, width), ascending cell id."""
    ids = np.arange(0 if include_medium else 1, state.n_cells + 1)
    return (state.grid[None, :, :] == ids[:, None, None]).astype(np.float64)


@numba.njit(cache=True)
def _boundary_mask(grid, offsets):
    h, w = grid.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for r in range(h):
        for c in range(w):
            v = grid[r, c]
            for k in range(offsets.shape[0]):
                rr = r + offsets[k, 0]
                cc = c + offsets[k, 1]
                if 0 <= rr < h and 0 <= cc < w and grid[rr, cc] != v:
                    out[r, c] = True
                    break
    return out


def boundary_mask(state_or_grid, nb: Neighborhood = DEFAULT_NEIGHBORHOOD) -> np.ndarray:
    grid = state_or_grid.grid if isinstance(state_or_grid, LatticeState) else state_or_grid
    return _boundary_mask(np.ascontiguousarray(grid, dtype=np.int64), Neighborhood.parse(nb).offsets)


def boundary_sites(state: LatticeState, nb: Neighborhood = DEFAULT_NEIGHBORHOOD) -> np.ndarray:
    """Flat (row-major) indices of sites with at least one neighbor in another cell."""
    return np.flatnonzero(boundary_mask(state, nb))


def volume_array(state: LatticeState) -> np.ndarray:
    """Volumes indexed by cell id (index 0 is the medium)."""
    return np.bincount(state.grid.ravel(), minlength=state.cell_types.size)


def cell_volumes(state: LatticeState) -> Counter:
    """Volumes of the non-medium cells present; missing cells read as 0."""
    vols = volume_array(state)
    return Counter({int(c): int(v) for c, v in enumerate(vols) if c > 0 and v > 0})


@numba.njit(cache=True)
def _component_counts(grid, n_ids, offsets):
    h, w = grid.shape
    seen = np.zeros((h, w), dtype=np.bool_)
    counts = np.zeros(n_ids, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    for r0 in range(h):
        for c0 in range(w):
            if seen[r0, c0]:
                continue
            v = grid[r0, c0]
            counts[v] += 1
            seen[r0, c0] = True
            top = 0
            stack[top] = r0 * w + c0
            top += 1
            while top > 0:
                top -= 1
                s = stack[top]
                r = s // w
                c = s % w
                for k in range(offsets.shape[0]):
                    rr = r + offsets[k, 0]
                    cc = c + offsets[k, 1]
                    if 0 <= rr < h and 0 <= cc < w and not seen[rr, cc] and grid[rr, cc] == v:
                        seen[rr, cc] = True
                        stack[top] = rr * w + cc
                        top += 1
    return counts


def component_counts(state: LatticeState, nb: Neighborhood = DEFAULT_NEIGHBORHOOD) -> np.ndarray:
    """Connected-component count per cell id (index 0 is the medium)."""
    return _component_counts(state.grid, state.cell_types.size, Neighborhood.parse(nb).offsets)


def fragment_count(state: LatticeState, nb: Neighborhood = DEFAULT_NEIGHBORHOOD) -> int:
    """Number of non-medium cells split into more than one connected piece."""
    return int((component_counts(state, nb)[1:] > 1).sum())


def dihedral(state: LatticeState, k: int) -> LatticeState:
    """Apply element ``k`` (0..7) of the square's symmetry group; 0 is the identity."""
    if state.height != state.width:
        raise LatticeError("dihedral symmetries need a square lattice")
    grid = np.rot90(state.grid, k % 4)
    if k >= 4:
        grid = grid[:, ::-1]
    return LatticeState(grid.copy(), state.cell_types.copy())
