"""Continuous tensor Lagrange spaces on the active mesh and their assembly.

The bilinear form is ``(∇u, ∇v) + (u, v)`` over the polygonal domain plus a
ghost penalty on the jumps of normal derivatives of order ``1..k`` across
ghost edges.  Inside cells reuse one reference element matrix; Cut cells use
the clipped-polygon rules; on a uniform grid the ghost local matrix does not
depend on ``h`` and is computed once per degree.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:  # CHOLMOD through cvxopt is faster than SuperLU on these SPD systems
    from cvxopt import cholmod as _cholmod
    from cvxopt import matrix as _cvx_matrix
    from cvxopt import spmatrix as _cvx_spmatrix
except ImportError:  # pragma: no cover
    _cholmod = None

from .errors import NonConvergence, OutOfDomain
from .mesh import INSIDE, CutMesh, edge_cells
from .quadrature import gauss01, clipped_rules, reference_square_rule
from .spline import ClosedSpline, boundary_resolution, sample_boundary
from .geometry import ccw

DIRECT_LIMIT = 2000


class LagrangeElement:
    """Tensor-product Lagrange basis of degree ``k`` on the unit square.

    Local dof ``a * (k + 1) + b`` sits at ``(a / k, b / k)``.
    """

    def __init__(self, k: int):
        if k not in (1, 2, 3):
            raise ValueError(f"degree must be 1, 2 or 3, got {k}")
        self.k = k
        self.n1 = k + 1
        nodes = np.linspace(0.0, 1.0, k + 1)
        vander = np.vander(nodes, k + 1, increasing=True)
        self.coeffs = np.linalg.inv(vander)  # column a: monomial coefficients of L_a

    @property
    def n_local(self) -> int:
        return self.n1 * self.n1

    def basis1d(self, x, nu: int = 0) -> np.ndarray:
        """Values of the ``nu``-th derivative of every 1D basis function, shape (n, k+1)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        c = np.polynomial.polynomial.polyder(self.coeffs, nu, axis=0) if nu else self.coeffs
        powers = x[:, None] ** np.arange(c.shape[0])[None, :]
        return powers @ c

    def tabulate(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Basis values (n, nb) and reference gradients (n, nb, 2) at local points."""
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(pts, dtype=float)))
        return _tabulate(pts, self.coeffs, self._dcoeffs)

    @property
    def _dcoeffs(self) -> np.ndarray:
        d = getattr(self, "_dc", None)
        if d is None:
            d = np.ascontiguousarray(np.polynomial.polynomial.polyder(self.coeffs, 1, axis=0))
            self._dc = d
        return d


@numba.njit(cache=True)
def _tabulate(pts, coeffs, dcoeffs):
    n = pts.shape[0]
    n1 = coeffs.shape[1]
    val = np.empty((n, n1 * n1))
    grad = np.empty((n, n1 * n1, 2))
    bx = np.empty(n1)
    by = np.empty(n1)
    dx = np.empty(n1)
    dy = np.empty(n1)
    for q in range(n):
        x = pts[q, 0]
        y = pts[q, 1]
        for a in range(n1):
            s = 0.0
            t = 0.0
            for m in range(coeffs.shape[0] - 1, -1, -1):
                s = s * x + coeffs[m, a]
                t = t * y + coeffs[m, a]
            bx[a] = s
            by[a] = t
            s = 0.0
            t = 0.0
            for m in range(dcoeffs.shape[0] - 1, -1, -1):
                s = s * x + dcoeffs[m, a]
                t = t * y + dcoeffs[m, a]
            dx[a] = s
            dy[a] = t
        for a in range(n1):
            for b in range(n1):
                i = a * n1 + b
                val[q, i] = bx[a] * by[b]
                grad[q, i, 0] = dx[a] * by[b]
                grad[q, i, 1] = bx[a] * dy[b]
    return val, grad


@lru_cache(maxsize=None)
def element(k: int) -> LagrangeElement:
    return LagrangeElement(k)


@lru_cache(maxsize=None)
def reference_matrices(k: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Stiffness and mass matrices of the unit reference cell."""
    pts, wts = reference_square_rule(order)
    val, grad = element(k).tabulate(pts)
    stiff = np.einsum("q,qad,qbd->ab", wts, grad, grad)
    mass = np.einsum("q,qa,qb->ab", wts, val, val)
    return stiff, mass


@lru_cache(maxsize=None)
def ghost_jump_operator(k: int, axis: int, order: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Normal-derivative jumps of one edge at its Gauss points and their weights.

    Row ``(s, q)`` of the (k * q, 2 * n_local) matrix maps the local dofs of
    both cells to ``[∂_n^s v](x_q)`` in reference units; the edge's penalty is
    ``Σ_r weights_r jump_r²``. Columns run over the first (left or lower)
    cell, then the second.
    """
    el = element(k)
    order = k + 1 if order is None else order
    z, w = gauss01(order)
    along = el.basis1d(z)  # (q, k+1)
    nb = el.n_local
    rows = []
    for s in range(1, k + 1):
        d1 = el.basis1d([1.0], s)[0]  # derivative at the far side of the first cell
        d2 = el.basis1d([0.0], s)[0]
        if axis == 0:  # normal is x: local (a, b) -> d[a] * along[b]
            j1 = (d1[None, :, None] * along[:, None, :]).reshape(len(z), nb)
            j2 = (d2[None, :, None] * along[:, None, :]).reshape(len(z), nb)
        else:  # normal is y: local (a, b) -> along[a] * d[b]
            j1 = (along[:, :, None] * d1[None, None, :]).reshape(len(z), nb)
            j2 = (along[:, :, None] * d2[None, None, :]).reshape(len(z), nb)
        rows.append(np.concatenate([j1, -j2], axis=1))
    return np.concatenate(rows, axis=0), np.tile(w, k)


@lru_cache(maxsize=None)
def ghost_local_matrix(k: int, axis: int, order: int | None = None) -> np.ndarray:
    """Matrix of ``Σ_s h^(2s-1) ∫_E [∂_n^s u][∂_n^s v]`` for one edge (independent of ``h``).

    Rows/columns are the local dofs of the first (left or lower) cell followed
    by those of the second cell.
    """
    jump, wts = ghost_jump_operator(k, axis, order)
    return jump.T @ (wts[:, None] * jump)


@dataclass(frozen=True, eq=False)
class DofMap:
    """Continuous ``Q_k`` numbering of the lattice nodes of the active cells."""

    mesh: CutMesh
    k: int
    cells: np.ndarray  # active flat cell ids, row order of cell_dofs
    cell_dofs: np.ndarray  # (n_cells, (k+1)^2)
    nodes: np.ndarray  # (n_dofs, 2)
    lattice: np.ndarray  # dense lattice node -> dof (-1 when absent)
    cell_row: np.ndarray  # dense flat cell id -> row in ``cells`` (-1 when inactive)

    @property
    def n_dofs(self) -> int:
        return len(self.nodes)

    @property
    def element(self) -> LagrangeElement:
        return element(self.k)

    def lattice_ids(self, cells) -> np.ndarray:
        """Lattice node ids of the local dofs of arbitrary grid cells."""
        grid = self.mesh.grid
        k = self.k
        ny_lat = k * grid.cells[1] + 1
        i, j = grid.unflat(np.asarray(cells))
        a = np.arange(k + 1)
        li = (k * i)[:, None, None] + a[None, :, None]
        lj = (k * j)[:, None, None] + a[None, None, :]
        return (li * ny_lat + lj).reshape(len(i), -1)


def build_space(mesh: CutMesh, k: int) -> DofMap:
    """Number the dofs of ``V(k)`` on the active cells of ``mesh``."""
    if k not in (1, 2, 3):
        raise ValueError(f"degree must be 1, 2 or 3, got {k}")
    grid = mesh.grid
    nx, ny = grid.cells
    n_lat = (k * nx + 1) * (k * ny + 1)
    cells = np.asarray(mesh.active, dtype=np.int64)
    proto = DofMap(mesh, k, cells, np.zeros((0, 0), np.int64), np.zeros((0, 2)),
                   np.zeros(0, np.int64), np.zeros(0, np.int64))
    lat = proto.lattice_ids(cells)
    used = np.unique(lat)
    lattice = np.full(n_lat, -1, dtype=np.int64)
    lattice[used] = np.arange(len(used))
    cell_dofs = lattice[lat]
    ny_lat = k * ny + 1
    hk = grid.h / k
    nodes = np.stack([grid.origin[0] + (used // ny_lat) * hk, grid.origin[1] + (used % ny_lat) * hk], axis=1)
    cell_row = np.full(grid.n_cells, -1, dtype=np.int64)
    cell_row[cells] = np.arange(len(cells))
    for arr in (cell_dofs, nodes, lattice, cell_row):
        arr.setflags(write=False)
    return DofMap(mesh, k, cells, cell_dofs, nodes, lattice, cell_row)


@dataclass(frozen=True, eq=False)
class FeField:
    dofmap: DofMap
    coefficients: np.ndarray  # (n_dofs,) or (n_dofs, 2)

    @property
    def components(self) -> int:
        return 1 if self.coefficients.ndim == 1 else self.coefficients.shape[1]

    def to_csv(self, path) -> None:
        write_field_csv(self, path)


def interpolate(dofmap: DofMap, fn) -> FeField:
    """Nodal interpolant of ``fn(x, y)`` (scalar or returning an (n, c) array)."""
    vals = np.asarray(fn(dofmap.nodes[:, 0], dofmap.nodes[:, 1]), dtype=float)
    return FeField(dofmap, vals)


class Integrator:
    """Quadrature of the polygonal domain over the active cells of a dof map.

    Points are ordered Inside cells first (reference rule, cell-major) then Cut
    cells; integrands are arrays over :attr:`points` in that order.
    """

    def __init__(self, dofmap: DofMap, order: int | None = None, boundary: np.ndarray | None = None):
        self.dofmap = dofmap
        mesh = dofmap.mesh
        self.h = h = mesh.h
        self.order = order = dofmap.k + 1 if order is None else order
        el = dofmap.element
        self.boundary = mesh.boundary if boundary is None else ccw(boundary)

        status = mesh.status.ravel()[dofmap.cells]
        self.inside_rows = np.flatnonzero(status == INSIDE)
        self.cut_rows = np.flatnonzero(status != INSIDE)
        ref_pts, ref_w = reference_square_rule(order)
        self.ref_weights = ref_w * h * h
        self.ref_val, ref_grad = el.tabulate(ref_pts)
        self.ref_grad = ref_grad / h
        origins_in = mesh.grid.cell_origin(dofmap.cells[self.inside_rows]).reshape(-1, 2)
        pts_in = (origins_in[:, None, :] + h * ref_pts[None]).reshape(-1, 2)

        cut_cells = dofmap.cells[self.cut_rows]
        origins_cut = mesh.grid.cell_origin(cut_cells).reshape(-1, 2)
        rules = clipped_rules(self.boundary, origins_cut, h, order, cells=cut_cells)
        self.cut_ptr = rules.ptr
        counts = np.diff(rules.ptr)
        self.cut_point_row = np.repeat(self.cut_rows, counts)
        local = (rules.points - np.repeat(origins_cut, counts, axis=0)) / h
        self.cut_val, cg = el.tabulate(local)
        self.cut_grad = cg / h
        self.cut_weights = rules.weights
        self.cut_point_dofs = np.ascontiguousarray(dofmap.cell_dofs[self.cut_point_row])
        # tables of [value, d/dx, d/dy] per (point, local dof)
        self.ref_table = np.concatenate([self.ref_val[..., None], self.ref_grad], axis=-1)
        self.cut_table = np.concatenate([self.cut_val[..., None], self.cut_grad], axis=-1)
        self.n_inside_points = len(pts_in)
        self.points = np.concatenate([pts_in, rules.points])
        self.weights = np.concatenate([np.tile(self.ref_weights, len(self.inside_rows)), rules.weights])

    @property
    def area(self) -> float:
        return float(self.weights.sum())

    def integrate(self, values) -> float | np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))

    def values(self, coefficients) -> tuple[np.ndarray, np.ndarray]:
        """Field values (n, [c]) and gradients (n, [c,] 2) at :attr:`points`."""
        coef = np.asarray(coefficients, dtype=float)
        if coef.ndim == 2:
            parts = [self.values(coef[:, c]) for c in range(coef.shape[1])]
            return np.stack([p[0] for p in parts], axis=1), np.stack([p[1] for p in parts], axis=1)
        nb = self.dofmap.element.n_local
        cin = coef[self.dofmap.cell_dofs[self.inside_rows]]  # (m, nb)
        t_in = (cin @ self.ref_table.reshape(-1, nb, 3).transpose(1, 0, 2).reshape(nb, -1)).reshape(-1, 3)
        t_cut = _cut_values(coef, self.cut_point_dofs, self.cut_table)
        t = np.concatenate([t_in, t_cut])
        return t[:, 0], t[:, 1:]

    def load(self, scalar=None, vector=None) -> np.ndarray:
        """``b_i = ∫ scalar φ_i + vector · ∇φ_i`` for integrand arrays over :attr:`points`."""
        n = len(self.weights)
        tri = np.zeros((n, 3))
        if scalar is not None:
            tri[:, 0] = scalar
        if vector is not None:
            tri[:, 1:] = vector
        tri *= self.weights[:, None]
        n_in = self.n_inside_points
        m = len(self.inside_rows)
        nb = self.dofmap.element.n_local
        contrib_in = tri[:n_in].reshape(m, -1) @ self.ref_table.reshape(-1, nb, 3).transpose(0, 2, 1).reshape(-1, nb)
        out = np.bincount(self.dofmap.cell_dofs[self.inside_rows].ravel(), contrib_in.ravel(),
                          minlength=self.dofmap.n_dofs)
        _cut_load(tri[n_in:], self.cut_point_dofs, self.cut_table, out)
        return out

    def volume_matrix(self, stiffness: float = 1.0, mass: float = 1.0) -> sp.csr_matrix:
        """``stiffness (∇u, ∇v) + mass (u, v)`` over the domain."""
        dm = self.dofmap
        k = dm.k
        nb = dm.element.n_local
        K, M = reference_matrices(k, self.order)
        local_in = stiffness * K + mass * self.h * self.h * M
        local_cut = _accumulate_local(self.cut_ptr, self.cut_weights, self.cut_val, self.cut_grad,
                                      float(stiffness), float(mass))
        rows_in = dm.cell_dofs[self.inside_rows]
        rows_cut = dm.cell_dofs[self.cut_rows]
        data = np.concatenate([np.broadcast_to(local_in, (len(rows_in), nb, nb)).ravel(), local_cut.ravel()])
        dofs = np.concatenate([rows_in, rows_cut])
        r = np.repeat(dofs, nb, axis=1).ravel()
        c = np.tile(dofs, (1, nb)).ravel()
        return sp.csr_matrix((data, (r, c)), shape=(dm.n_dofs, dm.n_dofs))


@numba.njit(cache=True)
def _cut_values(coef, point_dofs, table):
    n, nb = point_dofs.shape
    out = np.zeros((n, 3))
    for q in range(n):
        for a in range(nb):
            c = coef[point_dofs[q, a]]
            out[q, 0] += c * table[q, a, 0]
            out[q, 1] += c * table[q, a, 1]
            out[q, 2] += c * table[q, a, 2]
    return out


@numba.njit(cache=True)
def _cut_load(tri, point_dofs, table, out):
    n, nb = point_dofs.shape
    for q in range(n):
        for a in range(nb):
            out[point_dofs[q, a]] += tri[q, 0] * table[q, a, 0] + tri[q, 1] * table[q, a, 1] + tri[q, 2] * table[q, a, 2]


@numba.njit(cache=True)
def _accumulate_local(ptr, w, val, grad, stiffness, mass):
    n_cells = len(ptr) - 1
    nb = val.shape[1]
    out = np.zeros((n_cells, nb, nb))
    for c in range(n_cells):
        for q in range(ptr[c], ptr[c + 1]):
            wq = w[q]
            for a in range(nb):
                ga0 = wq * grad[q, a, 0]
                ga1 = wq * grad[q, a, 1]
                va = wq * val[q, a]
                for b in range(a, nb):
                    out[c, a, b] += stiffness * (ga0 * grad[q, b, 0] + ga1 * grad[q, b, 1]) + mass * va * val[q, b]
        for a in range(nb):
            for b in range(a + 1, nb):
                out[c, b, a] = out[c, a, b]
    return out


def _ghost_blocks(dofmap: DofMap):
    mesh = dofmap.mesh
    first, second = edge_cells(mesh)
    axis = mesh.ghost_edges[:, 0]
    dofs = np.concatenate([dofmap.cell_dofs[dofmap.cell_row[first]], dofmap.cell_dofs[dofmap.cell_row[second]]], axis=1)
    return axis, dofs


def assemble_ghost_penalty(dofmap: DofMap, alpha: float = 1.0, order: int | None = None) -> sp.csr_matrix:
    """Matrix of the ghost penalty over the mesh's ghost edges (symmetric PSD)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    axis, dofs = _ghost_blocks(dofmap)
    k = dofmap.k
    locals_ = np.stack([ghost_local_matrix(k, 0, order), ghost_local_matrix(k, 1, order)])
    data = alpha * locals_[axis]  # (E, 2nb, 2nb)
    n2 = dofs.shape[1]
    r = np.repeat(dofs, n2, axis=1).ravel()
    c = np.tile(dofs, (1, n2)).ravel()
    n = dofmap.n_dofs
    G = sp.csr_matrix((data.ravel(), (r, c)), shape=(n, n))
    return ((G + G.T) * 0.5).tocsr()


def ghost_energy(dofmap: DofMap, coefficients, alpha: float = 1.0) -> float:
    """``J_h(v, v)`` as a sum of squared derivative jumps (sums over components).

    Squaring the jumps, rather than forming ``v' G v``, keeps the value exact
    to rounding squared when ``v`` is a global polynomial.
    """
    axis, dofs = _ghost_blocks(dofmap)
    k = dofmap.k
    coef = np.asarray(coefficients)
    ce = coef[dofs]
    if coef.ndim == 1:
        ce = ce[..., None]
    total = 0.0
    for ax in (0, 1):
        sel = axis == ax
        jump, wts = ghost_jump_operator(k, ax)
        jumps = np.einsum("ra,eac->erc", jump, ce[sel])
        total += float(np.einsum("r,erc->", wts, jumps * jumps))
    return alpha * total


def _integrator_for(dofmap: DofMap, spline: ClosedSpline | None, depth: int | None, order: int | None) -> Integrator:
    boundary = None
    if spline is not None and depth is not None:
        boundary = sample_boundary(spline, boundary_resolution(spline, dofmap.mesh.h / 2**depth))
    return Integrator(dofmap, order=order, boundary=boundary)


def assemble_operator(dofmap: DofMap, spline: ClosedSpline | None = None, alpha: float = 1.0,
                      k: int | None = None, depth: int | None = None, order: int | None = None,
                      integrator: Integrator | None = None) -> sp.csr_matrix:
    """Matrix of ``(∇u, ∇v) + (u, v) + J_h(u, v)``.

    The volume terms use the mesh's boundary polyline unless ``spline`` and
    ``depth`` are both given, in which case the boundary is resampled at
    spacing ``h / 2**depth``.
    """
    if k is not None and k != dofmap.k:
        raise ValueError(f"degree {k} does not match the dof map ({dofmap.k})")
    integ = integrator if integrator is not None else _integrator_for(dofmap, spline, depth, order)
    V = integ.volume_matrix()
    # averaging with the transpose removes summation-order asymmetry exactly
    return ((V + V.T) * 0.5 + assemble_ghost_penalty(dofmap, alpha)).tocsr()


def assemble_load(dofmap: DofMap, spline: ClosedSpline | None = None, g=None, depth: int | None = None,
                  order: int | None = None, integrator: Integrator | None = None) -> np.ndarray:
    """``b_i = ∫_Ω g φ_i`` for a callable ``g(x, y)``."""
    integ = integrator if integrator is not None else _integrator_for(dofmap, spline, depth, order)
    if g is None:
        return np.zeros(dofmap.n_dofs)
    pts = integ.points
    return integ.load(scalar=np.asarray(g(pts[:, 0], pts[:, 1]), dtype=float))


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float
    method: str


def solve_with_info(A, b, tol: float = 1e-10, method: str = "auto", maxiter: int | None = None,
                    x0=None) -> tuple[np.ndarray, SolveInfo]:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    ``method`` is ``"cg"`` (Jacobi-preconditioned conjugate gradients),
    ``"direct"`` (sparse LU) or ``"auto"`` (direct below ``DIRECT_LIMIT`` dofs).
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), SolveInfo(0, 0.0, "trivial")
    if method == "auto":
        method = "direct" if n < DIRECT_LIMIT else "cg"
    A = sp.csr_matrix(A)
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
        res = float(np.linalg.norm(A @ x - b)) / bnorm
        if not np.isfinite(res) or res > tol:
            raise NonConvergence("direct solve", res, 1)
        return x, SolveInfo(1, res, "direct")
    if method != "cg":
        raise ValueError(f"unknown method {method!r}")
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise NonConvergence("non-positive diagonal", float("nan"), 0)
    precond = spla.LinearOperator((n, n), matvec=lambda r: r / diag, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    maxiter = maxiter if maxiter is not None else max(1000, 20 * n)
    # the recursive residual drifts from the true one, so iterate to half the tolerance
    x, _ = spla.cg(A, b, x0=x0, rtol=0.5 * tol, atol=0.0, M=precond, maxiter=maxiter, callback=cb)
    res = float(np.linalg.norm(A @ x - b)) / bnorm
    if res > tol * (1 + 1e-6):
        raise NonConvergence("conjugate gradients", res, count[0])
    return x, SolveInfo(count[0], res, "cg")


def solve(A, b, tol: float = 1e-10, method: str = "auto", maxiter: int | None = None) -> np.ndarray:
    return solve_with_info(A, b, tol=tol, method=method, maxiter=maxiter)[0]


class Factorized:
    """Sparse Cholesky (or symmetric-mode LU) of one SPD operator, reused across right-hand sides."""

    def __init__(self, A, tol: float = 1e-10):
        self.A = sp.csr_matrix(A)
        self.tol = tol
        self._factor = None
        self._lu = None
        if _cholmod is not None:
            low = sp.tril(self.A).tocoo()
            M = _cvx_spmatrix(_cvx_matrix(low.data), _cvx_matrix(low.row.astype(np.int64)),
                              _cvx_matrix(low.col.astype(np.int64)), size=self.A.shape)
            try:
                self._factor = _cholmod.symbolic(M, uplo="L")
                _cholmod.numeric(M, self._factor)
            except ArithmeticError:
                self._factor = None
        if self._factor is None:
            self._lu = spla.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))

    def _solve(self, b: np.ndarray) -> np.ndarray:
        if self._factor is None:
            return self._lu.solve(b)
        B = _cvx_matrix(np.asfortranarray(b.reshape(len(b), -1)))
        _cholmod.solve(self._factor, B)
        return np.array(B).reshape(b.shape)

    def __call__(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = self._solve(b)
        bn = np.linalg.norm(b, axis=0)
        res = np.linalg.norm(self.A @ x - b, axis=0) / np.where(bn > 0, bn, 1.0)
        worst = float(np.max(res))
        if not np.isfinite(worst) or worst > self.tol:
            raise NonConvergence("factorized solve", worst, 1)
        return x


def _locate(dofmap: DofMap, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grid = dofmap.mesh.grid
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(grid.contains_point(pts)):
        bad = pts[~grid.contains_point(pts)][0]
        raise OutOfDomain(f"point {bad} is outside the background box")
    i, j = grid.locate(pts)
    flat = grid.flat(i, j)
    local = (pts - grid.cell_origin(flat)) / grid.h
    lat = dofmap.lattice_ids(flat)
    dofs = dofmap.lattice[lat]  # -1 where the node is not a dof
    return np.clip(local, 0.0, 1.0), dofs, pts


def _gather(field: FeField, dofs: np.ndarray) -> np.ndarray:
    coef = np.asarray(field.coefficients)
    out = coef[np.maximum(dofs, 0)]
    mask = dofs < 0
    out[mask] = 0.0
    return out


def eval_field(field: FeField, x) -> np.ndarray:
    """Values of the zero-extended field at points of the background box."""
    local, dofs, _ = _locate(field.dofmap, x)
    val, _ = field.dofmap.element.tabulate(local)
    c = _gather(field, dofs)
    if c.ndim == 2:
        return np.einsum("pb,pb->p", c, val)
    return np.einsum("pbc,pb->pc", c, val)


def eval_grad(field: FeField, x) -> np.ndarray:
    """Gradients of the zero-extended field, shape (n, 2) or (n, c, 2)."""
    local, dofs, _ = _locate(field.dofmap, x)
    _, grad = field.dofmap.element.tabulate(local)
    grad = grad / field.dofmap.mesh.h
    c = _gather(field, dofs)
    if c.ndim == 2:
        return np.einsum("pb,pbd->pd", c, grad)
    return np.einsum("pbc,pbd->pcd", c, grad)


def write_field_csv(field: FeField, path) -> None:
    coef = np.asarray(field.coefficients)
    coef2 = coef[:, None] if coef.ndim == 1 else coef
    names = ["value"] if coef.ndim == 1 else [f"value_{c}" for c in range(coef.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_x", "node_y", *names])
        for node, vals in zip(field.dofmap.nodes, coef2):
            writer.writerow([f"{node[0]:.17g}", f"{node[1]:.17g}", *(f"{v:.17g}" for v in vals)])


def write_field_vtk(field: FeField, path, name: str = "field") -> None:
    """Legacy VTK structured points with the field sampled on the grid vertices."""
    grid = field.dofmap.mesh.grid
    nx, ny = grid.cells
    xs = grid.origin[0] + grid.h * np.arange(nx + 1)
    ys = grid.origin[1] + grid.h * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")  # VTK orders x fastest
    vals = eval_field(field, np.stack([X.ravel(), Y.ravel()], axis=1))
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\n")
        fh.write(f"ORIGIN {grid.origin[0]:.17g} {grid.origin[1]:.17g} 0\n")
        fh.write(f"SPACING {grid.h:.17g} {grid.h:.17g} 1\n")
        fh.write(f"POINT_DATA {len(vals)}\n")
        if vals.ndim == 1:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(f"{v:.17g}" for v in vals) + "\n")
        else:
            fh.write(f"VECTORS {name} double\n")
            fh.write("\n".join(f"{v[0]:.17g} {v[1]:.17g} 0" for v in vals) + "\n")
