"""Uniform-grid spatial hash for fixed-radius neighbour queries."""
from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class NeighborTable:
    """CSR neighbour lists over a compact set of particles.

    Row ``k`` describes particle ``particles[k]``; its neighbours are the rows
    ``indices[offsets[k]:offsets[k + 1]]`` in ascending order.
    """

    offsets: np.ndarray
    indices: np.ndarray
    cell_size: float
    particles: np.ndarray

    @property
    def n_pairs(self):
        return len(self.indices)

    def neighbors_of(self, row):
        return self.indices[self.offsets[row]:self.offsets[row + 1]]

    def as_sets(self):
        """Map global particle id -> set of global neighbour ids."""
        ids = self.particles
        return {int(ids[k]): set(ids[self.neighbors_of(k)].tolist()) for k in range(len(ids))}


@njit(cache=True)
def _grid_search(p, h, max_cells):
    n = p.shape[0]
    h2 = h * h
    cells = np.empty((n, 3), dtype=np.int64)
    for i in range(n):
        for a in range(3):
            cells[i, a] = np.int64(np.floor(p[i, a] / h))
    lo = np.empty(3, dtype=np.int64)
    dims = np.empty(3, dtype=np.int64)
    for a in range(3):
        lo[a] = cells[:, a].min()
        dims[a] = cells[:, a].max() - lo[a] + 1
    keys = np.empty(n, dtype=np.int64)
    for i in range(n):
        keys[i] = ((cells[i, 0] - lo[0]) * dims[1] + (cells[i, 1] - lo[1])) * dims[2] + (cells[i, 2] - lo[2])
    order = np.argsort(keys, kind="mergesort")
    sorted_keys = keys[order]
    # dense cell table when the bounding grid is small, binary search otherwise
    ncells = dims[0] * dims[1] * dims[2]
    dense = ncells <= max_cells
    if dense:
        start_of = np.zeros(ncells + 1, dtype=np.int64)
        for i in range(n):
            start_of[keys[i] + 1] += 1
        for c in range(ncells):
            start_of[c + 1] += start_of[c]
    else:
        start_of = np.zeros(1, dtype=np.int64)

    counts = np.zeros(n, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    out = np.empty(0, dtype=np.int64)
    fill = np.zeros(n, dtype=np.int64)
    for sweep in range(2):
        if sweep == 1:
            for i in range(n):
                offsets[i + 1] = offsets[i] + counts[i]
            out = np.empty(offsets[n], dtype=np.int64)
            fill[:] = offsets[:-1]
        for i in range(n):
            for dx in range(-1, 2):
                cx = cells[i, 0] - lo[0] + dx
                if cx < 0 or cx >= dims[0]:
                    continue
                for dy in range(-1, 2):
                    cy = cells[i, 1] - lo[1] + dy
                    if cy < 0 or cy >= dims[1]:
                        continue
                    for dz in range(-1, 2):
                        cz = cells[i, 2] - lo[2] + dz
                        if cz < 0 or cz >= dims[2]:
                            continue
                        key = (cx * dims[1] + cy) * dims[2] + cz
                        if dense:
                            start = start_of[key]
                            stop = start_of[key + 1]
                        else:
                            start = np.searchsorted(sorted_keys, key, side="left")
                            stop = np.searchsorted(sorted_keys, key, side="right")
                        for s in range(start, stop):
                            j = order[s]
                            if j == i:
                                continue
                            d0 = p[i, 0] - p[j, 0]
                            d1 = p[i, 1] - p[j, 1]
                            d2 = p[i, 2] - p[j, 2]
                            if d0 * d0 + d1 * d1 + d2 * d2 < h2:
                                if sweep == 0:
                                    counts[i] += 1
                                else:
                                    out[fill[i]] = j
                                    fill[i] += 1
    for i in range(n):
        out[offsets[i]:offsets[i + 1]].sort()
    return offsets, out


def build_neighbors(positions, h, particles=None):
    """Grid-hash neighbour search with cell size ``h``.

    ``positions`` holds only the particles to consider (normally the active
    ones, already predicted). ``particles`` gives their global ids and
    defaults to ``arange(len(positions))``.
    """
    p = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    if particles is None:
        particles = np.arange(len(p))
    if len(p) == 0:
        return NeighborTable(np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), float(h),
                             np.asarray(particles, dtype=np.int64))
    offsets, idx = _grid_search(p, float(h), 4 * len(p) + 4096)
    return NeighborTable(offsets, idx, float(h), np.asarray(particles, dtype=np.int64))


def brute_force_neighbors(positions, h):
    """O(N^2) reference search; returns row -> set of rows within distance ``h``."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    diff = p[:, None, :] - p[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    close = d2 < h * h
    np.fill_diagonal(close, False)
    return {i: set(np.flatnonzero(close[i]).tolist()) for i in range(len(p))}
