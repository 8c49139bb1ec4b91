"""Polygon kernels used by the cut-cell classification and quadrature.

The heavy loops (clipping the boundary polygon against every cut cell and the
vertical-slab decomposition of the clipped region) are compiled with numba.
"""

from __future__ import annotations

import numba
import numpy as np


def signed_area(poly: np.ndarray) -> float:
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def ccw(poly: np.ndarray) -> np.ndarray:
    """Return the polygon with counter-clockwise orientation."""
    return poly if signed_area(poly) >= 0 else poly[::-1].copy()


def points_in_polygon(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Even-odd test of a few points against a closed polygon (no closing vertex)."""
    pts = np.atleast_2d(pts)
    a = poly
    b = np.roll(poly, -1, axis=0)
    out = np.zeros(len(pts), dtype=bool)
    chunk = max(1, 2_000_000 // max(1, len(poly)))
    for start in range(0, len(pts), chunk):
        p = pts[start:start + chunk]
        px = p[:, 0:1]
        py = p[:, 1:2]
        ay, by = a[None, :, 1], b[None, :, 1]
        spans = (ay <= py) != (by <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = a[None, :, 0] + (py - ay) * (b[None, :, 0] - a[None, :, 0]) / (by - ay)
        out[start:start + chunk] = (np.sum(spans & (xc > px), axis=1) % 2) == 1
    return out


@numba.njit(cache=True)
def _clip_halfplane(xs, ys, n, axis, value, keep_greater, ox, oy):
    """Sutherland-Hodgman step; writes the clipped chain to (ox, oy)."""
    m = 0
    if n == 0:
        return 0
    px = xs[n - 1]
    py = ys[n - 1]
    pc = px if axis == 0 else py
    p_in = pc >= value if keep_greater else pc <= value
    for i in range(n):
        cx = xs[i]
        cy = ys[i]
        cc = cx if axis == 0 else cy
        c_in = cc >= value if keep_greater else cc <= value
        if c_in != p_in:
            t = (value - pc) / (cc - pc)
            if axis == 0:
                ox[m] = value
                oy[m] = py + t * (cy - py)
            else:
                ox[m] = px + t * (cx - px)
                oy[m] = value
            m += 1
        if c_in:
            ox[m] = cx
            oy[m] = cy
            m += 1
        px = cx
        py = cy
        pc = cc
        p_in = c_in
    return m


@numba.njit(cache=True)
def clip_to_box(vx, vy, x0, y0, x1, y1):
    """Clip a closed polygon to an axis-aligned box (may leave degenerate edges)."""
    n = len(vx)
    cap = 2 * n + 8
    ax = np.empty(cap)
    ay = np.empty(cap)
    bx = np.empty(cap)
    by = np.empty(cap)
    ax[:n] = vx
    ay[:n] = vy
    n = _clip_halfplane(ax, ay, n, 0, x0, True, bx, by)
    n = _clip_halfplane(bx, by, n, 0, x1, False, ax, ay)
    n = _clip_halfplane(ax, ay, n, 1, y0, True, bx, by)
    n = _clip_halfplane(bx, by, n, 1, y1, False, ax, ay)
    return ax[:n].copy(), ay[:n].copy()


@numba.njit(cache=True)
def _slabs_of_clipped(cx, cy, x0, x1, cell_index, out, count):
    """Append the trapezoids of one clipped region to ``out`` (rows: cell, a, b, la, lb, ua, ub)."""
    n = len(cx)
    if n < 3:
        return out, count
    h = x1 - x0
    tiny = 1e-13 * h
    xs = np.sort(cx)
    breaks = np.empty(n + 2)
    nb = 0
    breaks[nb] = x0
    nb += 1
    for i in range(n):
        if xs[i] > breaks[nb - 1] + tiny:
            breaks[nb] = xs[i]
            nb += 1
    if breaks[nb - 1] < x1 - tiny:
        breaks[nb] = x1
        nb += 1
    else:
        breaks[nb - 1] = x1

    ya_e = np.empty(n)
    yb_e = np.empty(n)
    ym_e = np.empty(n)
    sg_e = np.empty(n)
    for s in range(nb - 1):
        a = breaks[s]
        b = breaks[s + 1]
        mid = 0.5 * (a + b)
        k = 0
        for i in range(n):
            j = i + 1 if i + 1 < n else 0
            xa = cx[i]
            xb = cx[j]
            dx = xb - xa
            if dx == 0.0:
                continue
            lo = xa if xa < xb else xb
            hi = xb if xa < xb else xa
            if lo > mid or hi < mid:
                continue
            slope = (cy[j] - cy[i]) / dx
            ya_e[k] = cy[i] + slope * (a - xa)
            yb_e[k] = cy[i] + slope * (b - xa)
            ym_e[k] = cy[i] + slope * (mid - xa)
            sg_e[k] = 1.0 if dx > 0 else -1.0
            k += 1
        if k < 2:
            continue
        order = np.argsort(ym_e[:k])
        winding = 0.0
        for r in range(k):
            e = order[r]
            if winding > 0.5 and r > 0:
                p = order[r - 1]
                if count >= out.shape[0]:
                    grown = np.empty((2 * out.shape[0], 7))
                    grown[:count] = out[:count]
                    out = grown
                out[count, 0] = cell_index
                out[count, 1] = a
                out[count, 2] = b
                out[count, 3] = ya_e[p]
                out[count, 4] = yb_e[p]
                out[count, 5] = ya_e[e]
                out[count, 6] = yb_e[e]
                count += 1
            winding += sg_e[e]
    return out, count


@numba.njit(cache=True)
def cell_trapezoids(vx, vy, cell_x0, cell_y0, h):
    """Trapezoid decomposition of ``cell ∩ polygon`` for a batch of cells.

    The polygon must be counter-clockwise.  Each returned row describes the
    region ``a <= x <= b`` between the lines through ``(a, la), (b, lb)`` and
    ``(a, ua), (b, ub)``; column 0 is the position of the cell in the batch.
    """
    out = np.empty((max(16, 32 * len(cell_x0)), 7))
    count = 0
    for c in range(len(cell_x0)):
        x0 = cell_x0[c]
        y0 = cell_y0[c]
        px, py = clip_to_box(vx, vy, x0, y0, x0 + h, y0 + h)
        out, count = _slabs_of_clipped(px, py, x0, x0 + h, c, out, count)
    return out[:count].copy()
