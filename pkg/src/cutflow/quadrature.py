"""Quadrature rules for full cells, cut cells and ghost edges.

Cut-cell rules come from the exact clipping of the boundary polyline against
the cell followed by a vertical-slab (trapezoid) decomposition of the clipped
region; every trapezoid carries a tensor Gauss rule, so all weights are
positive and polynomials are integrated exactly over the polygonal region.
The boundary resolution is set by ``depth``: the polyline spacing is
``h / 2**depth``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import cell_trapezoids, ccw, points_in_polygon
from .spline import ClosedSpline, boundary_resolution, sample_boundary

DEFAULT_DEPTH = 4
ORACLE_DEPTH = 8


@dataclass(frozen=True)
class Cell:
    x0: float
    y0: float
    h: float


@dataclass(frozen=True, eq=False)
class QuadRule:
    points: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,)

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def integrate(self, fn) -> float:
        if len(self.weights) == 0:
            return 0.0
        return float(np.dot(self.weights, fn(self.points[:, 0], self.points[:, 1])))


@lru_cache(maxsize=None)
def gauss01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def reference_square_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on the unit square: points (n, 2), weights (n,)."""
    x, w = gauss01(order)
    xi, eta = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([xi.ravel(), eta.ravel()], axis=1)
    wts = np.outer(w, w).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def full_cell_rule(cell: Cell, order: int) -> QuadRule:
    """Tensor Gauss rule, exact for per-variable degree ``2*order - 1``."""
    if order < 1:
        raise ValueError("order must be >= 1")
    pts, wts = reference_square_rule(order)
    return QuadRule(np.array([cell.x0, cell.y0]) + cell.h * pts, cell.h * cell.h * wts)


def ghost_edge_rule(edge, order: int) -> QuadRule:
    """Gauss rule along the full segment ``edge = (start, end)``."""
    start, end = (np.asarray(p, dtype=float) for p in edge)
    x, w = gauss01(order)
    length = float(np.linalg.norm(end - start))
    return QuadRule(start + x[:, None] * (end - start), w * length)


def trapezoid_points(traps: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss points of the trapezoids from :func:`cell_trapezoids`.

    Returns ``(batch_position, points, weights)``.
    """
    g, w = gauss01(order)
    cell = traps[:, 0].astype(np.int64)
    a, b = traps[:, 1], traps[:, 2]
    la, lb, ua, ub = traps[:, 3], traps[:, 4], traps[:, 5], traps[:, 6]
    width = b - a
    x = a[:, None] + width[:, None] * g[None, :]  # (T, q)
    lower = la[:, None] + (lb - la)[:, None] * g[None, :]
    height = np.maximum(ua[:, None] + (ub - ua)[:, None] * g[None, :] - lower, 0.0)
    y = lower[:, :, None] + height[:, :, None] * g[None, None, :]  # (T, qx, qy)
    wt = (width[:, None] * w[None, :] * height)[:, :, None] * w[None, None, :]
    xx = np.broadcast_to(x[:, :, None], y.shape)
    q = order * order
    pts = np.stack([xx.reshape(-1), y.reshape(-1)], axis=1)
    return np.repeat(cell, q), pts, wt.reshape(-1)


@dataclass(frozen=True, eq=False)
class CutCellRules:
    """Concatenated rules of a batch of cells; cell ``n`` owns ``ptr[n]:ptr[n+1]``."""

    cells: np.ndarray  # flat cell ids
    ptr: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    def rule(self, n: int) -> QuadRule:
        s = slice(self.ptr[n], self.ptr[n + 1])
        return QuadRule(self.points[s], self.weights[s])

    def cell_measures(self) -> np.ndarray:
        csum = np.concatenate([[0.0], np.cumsum(self.weights)])
        return csum[self.ptr[1:]] - csum[self.ptr[:-1]]


def clipped_rules(poly: np.ndarray, origins: np.ndarray, h: float, order: int, cells=None) -> CutCellRules:
    """Rules for ``cell ∩ polygon`` on a batch of cells given by their lower-left corners."""
    poly = ccw(np.asarray(poly, dtype=float))
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    traps = cell_trapezoids(
        np.ascontiguousarray(poly[:, 0]), np.ascontiguousarray(poly[:, 1]),
        np.ascontiguousarray(origins[:, 0]), np.ascontiguousarray(origins[:, 1]), float(h),
    )
    pos, pts, wts = trapezoid_points(traps, order)
    keep = wts > 0
    pos, pts, wts = pos[keep], pts[keep], wts[keep]
    order_ = np.argsort(pos, kind="stable")
    pos, pts, wts = pos[order_], pts[order_], wts[order_]
    ptr = np.searchsorted(pos, np.arange(len(origins) + 1))
    ids = np.arange(len(origins)) if cells is None else np.asarray(cells)
    return CutCellRules(ids, ptr, pts, wts)


def cut_rules(mesh, order: int) -> CutCellRules:
    """Rules for every Cut cell of a classified mesh (uses the mesh's polyline)."""
    origins = mesh.grid.cell_origin(mesh.cut)
    return clipped_rules(mesh.boundary, origins.reshape(-1, 2), mesh.h, order, cells=mesh.cut)


def cut_cell_rule(cell: Cell, spline: ClosedSpline, depth: int = DEFAULT_DEPTH, order: int = 3) -> QuadRule:
    """Rule integrating over ``cell ∩ Ω`` with boundary resolution ``h / 2**depth``.

    A cell the boundary does not touch gets the full-cell rule (inside) or an
    empty rule (outside).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    poly = ccw(sample_boundary(spline, boundary_resolution(spline, cell.h / 2**depth)))
    lo = np.array([cell.x0, cell.y0])
    hi = lo + cell.h
    a = poly
    b = np.roll(poly, -1, axis=0)
    touches = np.all((np.minimum(a, b) <= hi) & (np.maximum(a, b) >= lo), axis=1)
    if not touches.any():
        if points_in_polygon(poly, (lo + 0.5 * cell.h)[None])[0]:
            return full_cell_rule(cell, order)
        return QuadRule(np.zeros((0, 2)), np.zeros(0))
    return clipped_rules(poly, lo[None], cell.h, order).rule(0)
