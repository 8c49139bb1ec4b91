"""Fixed background grid and its classification against the moving boundary.

Cells are squares of side ``h``.  A cell is *Cut* when its closure meets the
boundary polyline, *Inside* when it lies in the domain without touching the
boundary and *Outside* otherwise.  Active cells are Cut plus Inside; ghost
edges are the interior edges of the active patch that touch a Cut cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import DomainEscape
from .geometry import ccw, points_in_polygon
from .spline import ClosedSpline, boundary_resolution, sample_boundary

OUTSIDE, CUT, INSIDE = 0, 1, 2
STATUS_NAMES = {OUTSIDE: "outside", CUT: "cut", INSIDE: "inside"}

DEFAULT_SUBDIVISION = 16  # boundary polyline spacing is h / DEFAULT_SUBDIVISION
_CLOSURE_TOL = 1e-12


@dataclass(frozen=True)
class UniformGrid:
    """Uniform partition of the box ``origin + [0, extent]`` into square cells."""

    origin: tuple[float, float]
    extent: tuple[float, float]
    cells: tuple[int, int]

    def __post_init__(self):
        ex, ey = self.extent
        nx, ny = self.cells
        if nx < 1 or ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not np.isclose(ex / nx, ey / ny, rtol=1e-12, atol=0.0):
            raise ValueError(f"cells are not square: {ex / nx} x {ey / ny}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "extent", (float(ex), float(ey)))
        object.__setattr__(self, "cells", (int(nx), int(ny)))

    @classmethod
    def square(cls, lo: float, hi: float, n: int) -> UniformGrid:
        return cls((lo, lo), (hi - lo, hi - lo), (n, n))

    @property
    def h(self) -> float:
        return self.extent[0] / self.cells[0]

    @property
    def n_cells(self) -> int:
        return self.cells[0] * self.cells[1]

    def flat(self, i, j):
        return np.asarray(i) * self.cells[1] + np.asarray(j)

    def unflat(self, flat):
        flat = np.asarray(flat)
        return flat // self.cells[1], flat % self.cells[1]

    def cell_origin(self, flat) -> np.ndarray:
        i, j = self.unflat(flat)
        return np.stack([self.origin[0] + i * self.h, self.origin[1] + j * self.h], axis=-1)

    def contains_point(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        lo = np.array(self.origin)
        hi = lo + np.array(self.extent)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def locate(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Cell indices ``(i, j)`` containing each point (clamped at the far edges)."""
        pts = np.atleast_2d(pts)
        u = (pts - np.array(self.origin)) / self.h
        i = np.clip(np.floor(u[:, 0]).astype(np.int64), 0, self.cells[0] - 1)
        j = np.clip(np.floor(u[:, 1]).astype(np.int64), 0, self.cells[1] - 1)
        return i, j


@dataclass(frozen=True, eq=False)
class CutMesh:
    """Classification of a :class:`UniformGrid` against one boundary."""

    grid: UniformGrid
    status: np.ndarray  # (nx, ny) of OUTSIDE / CUT / INSIDE
    boundary: np.ndarray  # counter-clockwise polyline the classification used
    resolution: int
    active: np.ndarray  # flat ids, sorted
    cut: np.ndarray  # flat ids, sorted
    ghost_edges: np.ndarray  # (E, 3) rows (axis, i, j); see ghost_edges()

    @property
    def inside(self) -> np.ndarray:
        return np.flatnonzero(self.status.ravel() == INSIDE)

    @property
    def h(self) -> float:
        return self.grid.h

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell_i", "cell_j", "status"])
            nx, ny = self.grid.cells
            for i in range(nx):
                for j in range(ny):
                    writer.writerow([i, j, STATUS_NAMES[int(self.status[i, j])]])


def _closure_cells(u: np.ndarray, v: np.ndarray, nx: int, ny: int) -> np.ndarray:
    """Flat ids of every cell whose closure contains a point (grid units)."""
    out = []
    for du in (-_CLOSURE_TOL, _CLOSURE_TOL):
        for dv in (-_CLOSURE_TOL, _CLOSURE_TOL):
            i = np.floor(u + du).astype(np.int64)
            j = np.floor(v + dv).astype(np.int64)
            ok = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
            out.append(i[ok] * ny + j[ok])
    return np.unique(np.concatenate(out))


def _touched_cells(poly: np.ndarray, grid: UniformGrid) -> np.ndarray:
    """Flat ids of all cells whose closure meets the closed polyline."""
    nx, ny = grid.cells
    uv = (poly - np.array(grid.origin)) / grid.h
    a = uv
    b = np.roll(uv, -1, axis=0)
    # keep every edge shorter than half a cell so it crosses each line family at most once
    length = np.max(np.abs(b - a), axis=1)
    split = np.maximum(1, np.ceil(length / 0.5)).astype(np.int64)
    if np.any(split > 1):
        rep = np.repeat(np.arange(len(a)), split)
        frac = (np.arange(len(rep)) - np.repeat(np.cumsum(split) - split, split)) / np.repeat(split, split)
        starts = a[rep] + frac[:, None] * (b[rep] - a[rep])
        ends = np.roll(starts, -1, axis=0)
        a, b = starts, ends

    params = [np.zeros(len(a)), np.ones(len(a))]
    for axis in (0, 1):
        lo = np.minimum(a[:, axis], b[:, axis])
        hi = np.maximum(a[:, axis], b[:, axis])
        line = np.floor(hi)
        crosses = (line > lo) & (line < hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (line - a[:, axis]) / (b[:, axis] - a[:, axis])
        params.append(np.where(crosses, t, 0.0))
        params.append(np.where(crosses, t, 1.0))
    params = np.sort(np.stack(params, axis=1), axis=1)
    mids = 0.5 * (params[:, 1:] + params[:, :-1])
    samples = np.concatenate([params, mids], axis=1)
    pts = a[:, None, :] + samples[..., None] * (b - a)[:, None, :]
    pts = pts.reshape(-1, 2)
    return _closure_cells(pts[:, 0], pts[:, 1], nx, ny)


def classify(grid: UniformGrid, spline: ClosedSpline, spacing: float | None = None,
             clearance: float = 0.0, resolution: int | None = None) -> CutMesh:
    """Classify every grid cell against the boundary.

    The boundary is represented by a polyline on the spline with vertex
    spacing ``spacing`` (default ``h/16``); the same polyline defines the
    integration domain downstream.  Raises :class:`DomainEscape` when the
    boundary is not strictly inside the box by at least ``clearance``.
    """
    h = grid.h
    if resolution is None:
        resolution = boundary_resolution(spline, spacing if spacing is not None else h / DEFAULT_SUBDIVISION)
    poly = ccw(sample_boundary(spline, resolution))

    lo = np.array(grid.origin) + clearance
    hi = np.array(grid.origin) + np.array(grid.extent) - clearance
    tol = 1e-12 * max(grid.extent)
    pts = np.concatenate([poly, spline.points])
    if np.any(pts <= lo + tol) or np.any(pts >= hi - tol):
        raise DomainEscape(
            f"boundary spans [{pts.min(axis=0)}, {pts.max(axis=0)}], allowed ({lo}, {hi})"
        )

    nx, ny = grid.cells
    status = np.zeros((nx, ny), dtype=np.int8)
    touched = _touched_cells(poly, grid)
    status.ravel()[touched] = CUT

    free = status == OUTSIDE
    labels, n_labels = ndimage.label(free)
    if n_labels:
        # one representative per connected component decides its side
        flat_labels = labels.ravel()
        order = np.argsort(flat_labels, kind="stable")
        first = order[np.searchsorted(flat_labels[order], np.arange(1, n_labels + 1))]
        centers = grid.cell_origin(first) + 0.5 * h
        inside = points_in_polygon(poly, centers)
        lut = np.zeros(n_labels + 1, dtype=np.int8)
        lut[1:] = np.where(inside, INSIDE, OUTSIDE)
        status = np.where(free, lut[labels], status).astype(np.int8)

    flat_status = status.ravel()
    active = np.flatnonzero(flat_status != OUTSIDE)
    cut = np.flatnonzero(flat_status == CUT)
    status.setflags(write=False)
    edges = _ghost_edges(status)
    return CutMesh(grid, status, poly, resolution, active, cut, edges)


def _ghost_edges(status: np.ndarray) -> np.ndarray:
    act = status != OUTSIDE
    cut = status == CUT
    vert = act[:-1, :] & act[1:, :] & (cut[:-1, :] | cut[1:, :])
    horz = act[:, :-1] & act[:, 1:] & (cut[:, :-1] | cut[:, 1:])
    vi, vj = np.nonzero(vert)
    hi, hj = np.nonzero(horz)
    rows = np.concatenate([
        np.stack([np.zeros_like(vi), vi, vj], axis=1),
        np.stack([np.ones_like(hi), hi, hj], axis=1),
    ]).astype(np.int64)
    if len(rows) == 0:
        return rows.reshape(0, 3)
    order = np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0]))
    return rows[order]


def ghost_edges(mesh: CutMesh) -> np.ndarray:
    """Sorted ghost edges as rows ``(axis, i, j)``.

    ``axis == 0`` is the vertical edge between cells ``(i, j)`` and
    ``(i + 1, j)``; ``axis == 1`` the horizontal edge between ``(i, j)`` and
    ``(i, j + 1)``.
    """
    return mesh.ghost_edges


def edge_cells(mesh: CutMesh, edges: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flat ids of the (left/lower, right/upper) cells of each ghost edge."""
    e = mesh.ghost_edges if edges is None else edges
    axis, i, j = e[:, 0], e[:, 1], e[:, 2]
    first = mesh.grid.flat(i, j)
    second = mesh.grid.flat(i + (axis == 0), j + (axis == 1))
    return first, second


@dataclass(frozen=True)
class ReachabilityReport:
    """Hop counts from each Cut cell to a cell holding a disk of radius ``gamma*h``."""

    chain_length: dict  # flat cell id -> hops (inf when unreachable)
    flagged: list
    gamma: float
    max_chain: int


def _segment_distance(a: np.ndarray, b: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest of the segments ``a[k] -> b[k]``."""
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pij,ij->pi", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.min(np.linalg.norm(pts[:, None, :] - closest, axis=-1), axis=1)


def holds_disk(mesh: CutMesh, flat: int, gamma: float, samples: int = 5) -> bool:
    """Whether ``K ∩ Ω`` contains a disk of radius ``gamma*h`` (sampled centres)."""
    st = mesh.status.ravel()[flat]
    if st == INSIDE:
        return gamma <= 0.5
    if st == OUTSIDE or gamma > 0.5:
        return False
    h = mesh.h
    r = gamma * h
    x0, y0 = mesh.grid.cell_origin(flat)
    s = np.linspace(r, h - r, samples) if samples > 1 else np.array([0.5 * h])
    cx, cy = np.meshgrid(x0 + s, y0 + s, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    centers = centers[points_in_polygon(mesh.boundary, centers)]
    if len(centers) == 0:
        return False
    a = mesh.boundary
    b = np.roll(a, -1, axis=0)
    mid = np.array([x0, y0]) + 0.5 * h
    near = np.all(np.abs(np.minimum(a, b) - mid) <= 2 * h, axis=1)
    if not near.any():
        return True
    return bool(np.any(_segment_distance(a[near], b[near], centers) >= r))


def check_reachability(mesh: CutMesh, gamma: float = 0.45, max_chain: int = 5) -> ReachabilityReport:
    """Shortest ghost-edge chains from Cut cells to cells containing a ``gamma*h`` disk.

    Chain length counts ghost-edge hops, so a Cut cell that itself holds such
    a disk has length 0 and one next to an Inside cell has length 1.  Cells
    whose length exceeds ``max_chain`` are flagged.  Diagnostic only.
    """
    active = mesh.active
    index = {int(c): n for n, c in enumerate(active)}
    first, second = edge_cells(mesh)
    a = np.array([index[int(c)] for c in first], dtype=np.int64)
    b = np.array([index[int(c)] for c in second], dtype=np.int64)
    n = len(active)
    graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n)).tocsr()

    holds = np.array([holds_disk(mesh, int(c), gamma) for c in active], dtype=bool)
    sources = np.flatnonzero(holds)
    if len(sources):
        dist = dijkstra(graph, directed=False, indices=sources, unweighted=True, min_only=True)
    else:
        dist = np.full(n, np.inf)
    lengths = {int(c): float(dist[index[int(c)]]) for c in mesh.cut}
    flagged = sorted(c for c, d in lengths.items() if d > max_chain)
    return ReachabilityReport(lengths, flagged, gamma, max_chain)
