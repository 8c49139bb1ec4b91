"""Closed cubic-spline boundaries driven by control points.

The boundary is a periodic C2 cubic spline through an ordered, closed list of
control points, parametrised by cumulative chord length.  Besides fitting and
evaluation this module answers inside/outside queries against the exact
spline, samples polylines for the cut-cell geometry and redistributes control
points along the curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .errors import InvalidBoundary

ON_CURVE_TOL = 1e-12


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _segments_cross(p1, p2, q1, q2) -> np.ndarray:
    """Vectorised closed-segment intersection test for arrays of segments."""
    o1 = _orient(p1[:, 0], p1[:, 1], p2[:, 0], p2[:, 1], q1[:, 0], q1[:, 1])
    o2 = _orient(p1[:, 0], p1[:, 1], p2[:, 0], p2[:, 1], q2[:, 0], q2[:, 1])
    o3 = _orient(q1[:, 0], q1[:, 1], q2[:, 0], q2[:, 1], p1[:, 0], p1[:, 1])
    o4 = _orient(q1[:, 0], q1[:, 1], q2[:, 0], q2[:, 1], p2[:, 0], p2[:, 1])
    proper = (np.sign(o1) * np.sign(o2) <= 0) & (np.sign(o3) * np.sign(o4) <= 0)
    # collinear pieces only intersect when their bounding boxes overlap
    lo_p = np.minimum(p1, p2)
    hi_p = np.maximum(p1, p2)
    lo_q = np.minimum(q1, q2)
    hi_q = np.maximum(q1, q2)
    boxes = np.all((lo_p <= hi_q) & (lo_q <= hi_p), axis=1)
    return proper & boxes


def polygon_self_intersects(points: np.ndarray) -> bool:
    """Return True if the closed polygon through ``points`` is not simple.

    Candidate segment pairs are found by bucketing segment bounding boxes on a
    grid whose cell size is the longest chord, so the check stays close to
    linear in the number of points.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    a = pts
    b = np.roll(pts, -1, axis=0)
    d = b - a

    # adjacent segments can only overlap by folding back on themselves
    d_next = np.roll(d, -1, axis=0)
    cross = d[:, 0] * d_next[:, 1] - d[:, 1] * d_next[:, 0]
    dot = np.einsum("ij,ij->i", d, d_next)
    scale = np.linalg.norm(d, axis=1) * np.linalg.norm(d_next, axis=1)
    if np.any((np.abs(cross) <= 1e-14 * scale) & (dot < 0)):
        return True

    cell = float(np.max(np.linalg.norm(d, axis=1)))
    origin = pts.min(axis=0)
    lo = np.floor((np.minimum(a, b) - origin) / cell).astype(np.int64)
    hi = np.floor((np.maximum(a, b) - origin) / cell).astype(np.int64)
    width = int(hi[:, 0].max()) + 2
    seg_ids = []
    keys = []
    for dx in (0, 1):
        for dy in (0, 1):
            ix = lo[:, 0] + dx
            iy = lo[:, 1] + dy
            ok = (ix <= hi[:, 0]) & (iy <= hi[:, 1])
            seg_ids.append(np.nonzero(ok)[0])
            keys.append(iy[ok] * width + ix[ok])
    seg_ids = np.concatenate(seg_ids)
    keys = np.concatenate(keys)
    order = np.lexsort((seg_ids, keys))
    keys = keys[order]
    seg_ids = seg_ids[order]

    pairs_i = []
    pairs_j = []
    offset = 1
    while offset < len(keys):
        same = keys[offset:] == keys[:-offset]
        if not same.any():
            break
        pairs_i.append(seg_ids[:-offset][same])
        pairs_j.append(seg_ids[offset:][same])
        offset += 1
    if not pairs_i:
        return False
    i = np.concatenate(pairs_i)
    j = np.concatenate(pairs_j)
    i, j = np.minimum(i, j), np.maximum(i, j)
    gap = j - i
    keep = (gap != 0) & (gap != 1) & (gap != n - 1)
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return False
    return bool(np.any(_segments_cross(a[i], b[i], a[j], b[j])))


@dataclass(frozen=True, eq=False)
class ControlPolygon:
    """Ordered control points of a closed boundary (no repeated closing point)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidBoundary("control points must be an (n, 2) array")
        if len(pts) < 4:
            raise InvalidBoundary(f"need at least 4 control points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise InvalidBoundary("control points must be finite")
        chords = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        if np.any(chords <= 0.0):
            raise InvalidBoundary("consecutive control points coincide")
        if polygon_self_intersects(pts):
            raise InvalidBoundary("control polygon intersects itself")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def translated(self, shift) -> ControlPolygon:
        return ControlPolygon(self.points + np.asarray(shift, dtype=float))


def _solve_periodic_second_derivatives(points: np.ndarray, chords: np.ndarray) -> np.ndarray:
    """Second derivatives at the knots of the periodic interpolating cubic."""
    n = len(points)
    d_prev = np.roll(chords, 1)  # chord ending at knot j
    slope = (np.roll(points, -1, axis=0) - points) / chords[:, None]
    rhs = 6.0 * (slope - np.roll(slope, 1, axis=0))

    diag = 2.0 * (d_prev + chords)
    corner = chords[-1]
    # cyclic tridiagonal via Sherman-Morrison around a banded solve
    gamma = -diag[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = chords[:-1]
    ab[1, :] = diag
    ab[2, :-1] = chords[:-1]
    ab[1, 0] -= gamma
    ab[1, -1] -= corner * corner / gamma
    u = np.zeros(n)
    u[0] = gamma
    u[-1] = corner
    y = solve_banded((1, 1), ab, rhs)
    z = solve_banded((1, 1), ab, u)
    v_y = y[0] + corner / gamma * y[-1]
    v_z = z[0] + corner / gamma * z[-1]
    return y - np.outer(z, v_y / (1.0 + v_z))


@dataclass(frozen=True, eq=False)
class ClosedSpline:
    """Periodic cubic spline with chord-length knots.

    ``coeffs[j]`` holds ``(a, b, c, d)`` (each a 2-vector) of segment ``j`` so
    that ``Z(L_j + t) = a + b t + c t^2 + d t^3`` for ``0 <= t <= L_{j+1} - L_j``.
    """

    polygon: ControlPolygon
    knots: np.ndarray
    coeffs: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.polygon.points

    @property
    def n_segments(self) -> int:
        return len(self.polygon)

    @property
    def span(self) -> float:
        return float(self.knots[-1])

    @property
    def chords(self) -> np.ndarray:
        return np.diff(self.knots)

    def locate(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Segment index and local offset for parameter values (wrapped)."""
        s = np.mod(np.asarray(s, dtype=float), self.span)
        j = np.searchsorted(self.knots, s, side="right") - 1
        j = np.clip(j, 0, self.n_segments - 1)
        return j, s - self.knots[j]

    def _eval_local(self, j, t, nu: int = 0) -> np.ndarray:
        c = self.coeffs[j]
        a, b, cc, d = c[..., 0, :], c[..., 1, :], c[..., 2, :], c[..., 3, :]
        t = np.asarray(t)[..., None]
        if nu == 0:
            return a + t * (b + t * (cc + t * d))
        if nu == 1:
            return b + t * (2.0 * cc + 3.0 * t * d)
        if nu == 2:
            return 2.0 * cc + 6.0 * t * d
        if nu == 3:
            return 6.0 * d + 0.0 * t
        return np.zeros(np.shape(t)[:-1] + (2,))

    def __call__(self, s, nu: int = 0) -> np.ndarray:
        j, t = self.locate(s)
        return self._eval_local(j, t, nu)

    @cached_property
    def arclength(self) -> float:
        return float(_segment_arclengths(self).sum())

    @cached_property
    def area(self) -> float:
        """Signed enclosed area, exact (Green's theorem on the cubic pieces)."""
        x, w = np.polynomial.legendre.leggauss(4)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        d = self.chords
        t = d[:, None] * x[None, :]
        j = np.repeat(np.arange(self.n_segments)[:, None], len(x), axis=1)
        z = self._eval_local(j, t)
        dz = self._eval_local(j, t, 1)
        integrand = z[..., 0] * dz[..., 1] - z[..., 1] * dz[..., 0]
        return float(0.5 * np.sum(integrand * w[None, :] * d[:, None]))

    @cached_property
    def bbox(self) -> np.ndarray:
        """Bounding box ``[[xmin, ymin], [xmax, ymax]]`` of the Bezier hulls."""
        c = self.coeffs
        d = self.chords[:, None]
        p0 = c[:, 0]
        p1 = p0 + c[:, 1] * d / 3.0
        p2 = p0 + (2.0 * c[:, 1] * d + c[:, 2] * d * d) / 3.0
        p3 = p0 + c[:, 1] * d + c[:, 2] * d * d + c[:, 3] * d**3
        allp = np.concatenate([p0, p1, p2, p3])
        return np.array([allp.min(axis=0), allp.max(axis=0)])

    @cached_property
    def _monotone_pieces(self):
        return _build_monotone_pieces(self)


def fit_closed_spline(points) -> ClosedSpline:
    """Fit the periodic chord-length cubic spline through ``points``.

    Accepts a :class:`ControlPolygon` or anything convertible to one; the
    polygon checks raise :class:`InvalidBoundary`.
    """
    polygon = points if isinstance(points, ControlPolygon) else ControlPolygon(points)
    pts = polygon.points
    chords = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    knots = np.concatenate([[0.0], np.cumsum(chords)])
    m = _solve_periodic_second_derivatives(pts, chords)
    m_next = np.roll(m, -1, axis=0)
    d = chords[:, None]
    slope = (np.roll(pts, -1, axis=0) - pts) / d
    coeffs = np.empty((len(pts), 4, 2))
    coeffs[:, 0] = pts
    coeffs[:, 1] = slope - d * (2.0 * m + m_next) / 6.0
    coeffs[:, 2] = 0.5 * m
    coeffs[:, 3] = (m_next - m) / (6.0 * d)
    coeffs.setflags(write=False)
    knots.setflags(write=False)
    return ClosedSpline(polygon, knots, coeffs)


def evaluate(spline: ClosedSpline, s) -> tuple[np.ndarray, np.ndarray]:
    """Position and first derivative at arclength parameter(s) ``s``."""
    j, t = spline.locate(s)
    return spline._eval_local(j, t, 0), spline._eval_local(j, t, 1)


def _segment_arclengths(spline: ClosedSpline, subdivisions: int = 1) -> np.ndarray:
    x, w = np.polynomial.legendre.leggauss(10)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    d = spline.chords / subdivisions
    n = spline.n_segments
    j = np.repeat(np.arange(n), subdivisions)
    start = np.tile(np.arange(subdivisions), n) * np.repeat(d, subdivisions)
    step = np.repeat(d, subdivisions)
    t = start[:, None] + step[:, None] * x[None, :]
    jj = np.repeat(j[:, None], len(x), axis=1)
    speed = np.linalg.norm(spline._eval_local(jj, t, 1), axis=-1)
    return (speed * w[None, :]).sum(axis=1) * step


# -- inside/outside -----------------------------------------------------------------


def _quadratic_roots(a, b, c):
    """Real roots of a t^2 + b t + c (NaN where absent), stable for tiny a."""
    r1 = np.full(np.shape(a), np.nan)
    r2 = np.full(np.shape(a), np.nan)
    scale = np.maximum(np.abs(b), np.abs(c)) + 1e-300
    quad = np.abs(a) > 1e-14 * scale
    lin = ~quad & (np.abs(b) > 0)
    r1[lin] = -c[lin] / b[lin]
    disc = b * b - 4.0 * a * c
    ok = quad & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    q = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(ok, q / np.where(ok, a, 1.0), r1)
        r2 = np.where(ok & (q != 0), c / np.where(q != 0, q, 1.0), r2)
    return r1, r2


def _build_monotone_pieces(spline: ClosedSpline):
    """Split every segment at its y-extrema into y-monotone pieces."""
    c = spline.coeffs
    d = spline.chords
    n = spline.n_segments

    def interior(r):
        return np.where((r > 0) & (r < d), r, np.nan)

    ry1, ry2 = _quadratic_roots(3.0 * c[:, 3, 1], 2.0 * c[:, 2, 1], c[:, 1, 1])
    rx1, rx2 = _quadratic_roots(3.0 * c[:, 3, 0], 2.0 * c[:, 2, 0], c[:, 1, 0])
    ry = np.sort(np.stack([interior(ry1), interior(ry2)], axis=1), axis=1)
    ry = np.where(np.isnan(ry), d[:, None], ry)
    breaks = np.concatenate([np.zeros((n, 1)), ry, d[:, None]], axis=1)
    breaks = np.maximum.accumulate(breaks, axis=1)
    t_lo = breaks[:, :3]
    t_hi = breaks[:, 1:]
    seg = np.repeat(np.arange(n)[:, None], 3, axis=1)
    keep = t_hi > t_lo
    seg, t_lo, t_hi = seg[keep], t_lo[keep], t_hi[keep]

    lo_pt = spline._eval_local(seg, t_lo)
    hi_pt = spline._eval_local(seg, t_hi)
    # knot ends take the control point itself so adjacent pieces share ends bit-for-bit
    pts = spline.points
    lo_pt = np.where((t_lo == 0.0)[:, None], pts[seg], lo_pt)
    hi_pt = np.where((t_hi == d[seg])[:, None], pts[(seg + 1) % n], hi_pt)
    y_lo = lo_pt[:, 1]
    y_hi = hi_pt[:, 1]
    xs = [lo_pt[:, 0], hi_pt[:, 0]]
    for r in (rx1, rx2):
        r = r[seg]
        inside = (r > t_lo) & (r < t_hi)
        xr = spline._eval_local(seg, np.where(inside, r, t_lo))[:, 0]
        xs.append(np.where(inside, xr, xs[0]))
    xs = np.stack(xs, axis=1)
    return {
        "seg": seg,
        "t_lo": t_lo,
        "t_hi": t_hi,
        "y_lo": y_lo,
        "y_hi": y_hi,
        "ymin": np.minimum(y_lo, y_hi),
        "ymax": np.maximum(y_lo, y_hi),
        "xmin": xs.min(axis=1),
        "xmax": xs.max(axis=1),
    }


def _bisect_crossings(spline, seg, t_lo, t_hi, y_lo, qy, iterations: int = 64):
    """x-coordinate where each monotone piece reaches height ``qy``."""
    c = spline.coeffs[seg, :, 1]
    increasing = spline._eval_local(seg, t_hi)[:, 1] >= y_lo
    lo = t_lo.copy()
    hi = t_hi.copy()
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        y = c[:, 0] + mid * (c[:, 1] + mid * (c[:, 2] + mid * c[:, 3]))
        below = (y < qy) == increasing
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    return spline._eval_local(seg, t)[:, 0]


def contains(spline: ClosedSpline, x) -> np.ndarray | bool:
    """Inside test against the exact spline; points on the curve count as inside.

    Counts crossings of the ray towards +x with the y-monotone pieces of the
    cubic segments (half-open rule at piece ends); crossings with an
    ambiguous x-position are resolved by bisection on the cubic.
    """
    pts = np.asarray(x, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    qx = pts[:, 0]
    qy = pts[:, 1]
    npts = len(pts)
    pieces = spline._monotone_pieces
    tol = ON_CURVE_TOL * (1.0 + np.abs(pts).max(axis=1))

    count = np.zeros(npts, dtype=np.int64)
    on_curve = np.zeros(npts, dtype=bool)

    y0 = pieces["ymin"].min()
    y1 = pieces["ymax"].max()
    nb = int(np.clip(np.sqrt(len(pieces["seg"])), 1, 2048))
    bh = (y1 - y0) / nb if y1 > y0 else 1.0
    pb0 = np.clip(((pieces["ymin"] - y0) / bh).astype(np.int64), 0, nb - 1)
    pb1 = np.clip(((pieces["ymax"] - y0) / bh).astype(np.int64), 0, nb - 1)
    reps = pb1 - pb0 + 1
    entry_piece = np.repeat(np.arange(len(pb0)), reps)
    entry_bucket = pb0[entry_piece] + (np.arange(len(entry_piece)) - np.repeat(np.cumsum(reps) - reps, reps))
    order = np.argsort(entry_bucket, kind="stable")
    entry_piece = entry_piece[order]
    bucket_start = np.searchsorted(entry_bucket[order], np.arange(nb + 1))

    in_band = (qy >= y0 - tol) & (qy <= y1 + tol)
    qidx = np.nonzero(in_band)[0]
    qb = np.clip(((qy[qidx] - y0) / bh).astype(np.int64), 0, nb - 1)
    qorder = np.argsort(qb, kind="stable")
    qidx = qidx[qorder]
    qb = qb[qorder]
    q_start = np.searchsorted(qb, np.arange(nb + 1))

    for b in range(nb):
        qs = qidx[q_start[b]:q_start[b + 1]]
        if len(qs) == 0:
            continue
        ps = entry_piece[bucket_start[b]:bucket_start[b + 1]]
        if len(ps) == 0:
            continue
        chunk = max(1, 4_000_000 // len(ps))
        pymin = pieces["ymin"][ps]
        pymax = pieces["ymax"][ps]
        pxmin = pieces["xmin"][ps]
        pxmax = pieces["xmax"][ps]
        for start in range(0, len(qs), chunk):
            q = qs[start:start + chunk]
            px_ = qx[q][:, None]
            py_ = qy[q][:, None]
            tq = tol[q][:, None]
            spans = (pymin[None, :] <= py_) & (py_ < pymax[None, :])
            right = spans & (pxmin[None, :] > px_ + tq)
            count[q] += right.sum(axis=1)
            near = (pxmin[None, :] <= px_ + tq) & (pxmax[None, :] >= px_ - tq)
            ambiguous = spans & near
            # on-curve detection also needs the closed ends of each piece
            touching = near & (pymin[None, :] <= py_ + tq) & (py_ - tq <= pymax[None, :]) & ~spans
            for mask, counted in ((ambiguous, True), (touching, False)):
                qi, pi = np.nonzero(mask)
                if len(qi) == 0:
                    continue
                pid = ps[pi]
                qq = q[qi]
                target = np.clip(qy[qq], pieces["ymin"][pid], pieces["ymax"][pid])
                xc = _bisect_crossings(
                    spline, pieces["seg"][pid], pieces["t_lo"][pid], pieces["t_hi"][pid],
                    pieces["y_lo"][pid], target,
                )
                yc_ok = np.abs(target - qy[qq]) <= tol[qq]
                hit = (np.abs(xc - qx[qq]) <= tol[qq]) & yc_ok
                on_curve[qq[hit]] = True
                if counted:
                    np.add.at(count, qq[xc > qx[qq] + tol[qq]], 1)
    inside = (count % 2 == 1) | on_curve
    if scalar:
        return bool(inside[0])
    return inside


# -- sampling -----------------------------------------------------------------------


def polyline(spline: ClosedSpline, samples_per_segment: int) -> np.ndarray:
    """Closed polyline with ``samples_per_segment`` uniform samples per segment."""
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")
    n = spline.n_segments
    frac = np.arange(samples_per_segment) / samples_per_segment
    j = np.repeat(np.arange(n), samples_per_segment)
    t = np.tile(frac, n) * spline.chords[j]
    return spline._eval_local(j, t)


def boundary_resolution(spline: ClosedSpline, spacing: float) -> int:
    """Sampling rule giving a polyline vertex spacing of about ``spacing``.

    Positive values subdivide every segment that many times; negative values
    ``-m`` keep every ``m``-th control point.  The result depends only on the
    mean chord, so small perturbations of the points keep the same rule.
    """
    mean = spline.span / spline.n_segments
    ratio = mean / spacing
    if ratio >= 1.0:
        return int(np.ceil(ratio - 1e-9))
    stride = max(1, int(np.floor(1.0 / ratio + 1e-9)))
    stride = min(stride, spline.n_segments // 4)
    return -stride if stride > 1 else 1


def sample_boundary(spline: ClosedSpline, resolution: int) -> np.ndarray:
    """Closed polyline on the spline following a :func:`boundary_resolution` rule."""
    if resolution >= 1:
        return polyline(spline, resolution)
    return np.array(spline.points[::-resolution])


def resample(spline: ClosedSpline, target_spacing: float) -> ControlPolygon:
    """Control points at (nearly) uniform arclength spacing along the spline."""
    if target_spacing <= 0:
        raise ValueError("target_spacing must be positive")
    sub = 16
    pieces = _segment_arclengths(spline, sub)
    cum = np.concatenate([[0.0], np.cumsum(pieces)])
    total = cum[-1]
    count = max(4, int(round(total / target_spacing)))
    n = spline.n_segments
    j = np.repeat(np.arange(n), sub)
    start = spline.knots[j] + np.tile(np.arange(sub), n) * np.repeat(spline.chords / sub, sub)
    params = np.concatenate([start, [spline.span]])
    origin = spline(0.0)
    targets = np.arange(count) * (total / count)
    s = np.interp(targets, cum, params)
    pts = spline(s)
    pts[0] = origin
    return ControlPolygon(pts)


# -- io -----------------------------------------------------------------------------


def write_polygon_csv(path, polygon) -> None:
    pts = polygon.points if isinstance(polygon, ControlPolygon) else np.asarray(polygon)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for x, y in pts:
            writer.writerow([repr(float(x)), repr(float(y))])


def read_polygon_csv(path) -> ControlPolygon:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["x", "y"]:
            raise InvalidBoundary(f"{path}: expected header 'x,y', got {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    return ControlPolygon(np.array(rows))
