"""Shape gradient flow: state, adjoint, velocity and the control-point update.

One step classifies the fixed grid against the current spline, solves the
state and adjoint problems, assembles the volume form of the shape derivative
for every vector basis function, solves the velocity problem with the same
stabilized operator and moves the control points with the velocity evaluated
at the points themselves.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import fem
from .errors import CutFlowError, DomainEscape, StepFailure
from .mesh import CutMesh, UniformGrid, classify
from .spline import ClosedSpline, ControlPolygon, fit_closed_spline, resample, write_polygon_csv

ScalarFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ShapeProblem:
    """Tracking functional ``J = ½∫|u − u_d|²`` with state ``−Δu + u = f``, ``∂_n u = 0``.

    ``grad_f`` and ``grad_ud`` return arrays of shape (n, 2).
    """

    f: ScalarFn
    grad_f: Callable
    u_d: ScalarFn
    grad_ud: Callable
    name: str = "tracking"


@dataclass(frozen=True)
class Discretization:
    k: int = 2
    alpha: float = 1.0
    subdivision: int = 16  # boundary polyline spacing h / subdivision
    order: int | None = None  # Gauss order per axis, default k + 1
    solver: str = "direct"  # "direct" (one factorization per step) or "cg"
    tol: float = 1e-10


@dataclass(frozen=True, eq=False)
class Fields:
    """Everything computed on one boundary configuration."""

    dofmap: fem.DofMap
    integrator: fem.Integrator
    u: fem.FeField
    p: fem.FeField
    w: fem.FeField
    load: np.ndarray  # (n_dofs, 2) shape derivative against each vector basis function
    J: float
    iterations: int


@dataclass(frozen=True, eq=False)
class FlowState:
    time: float
    step: int
    spline: ClosedSpline
    mesh: CutMesh
    fields: Fields

    @property
    def J_value(self) -> float:
        return self.fields.J

    @property
    def u(self) -> fem.FeField:
        return self.fields.u

    @property
    def p(self) -> fem.FeField:
        return self.fields.p

    @property
    def w(self) -> fem.FeField:
        return self.fields.w


@dataclass(frozen=True)
class TraceRecord:
    step: int
    time: float
    J: float
    w_h1_norm: float
    dofs: int
    iters: int
    n_points: int


@dataclass
class FlowTrace:
    records: list[TraceRecord] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    final: FlowState | None = None

    @property
    def J(self) -> np.ndarray:
        return np.array([r.J for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "J", "w_h1_norm", "dofs", "iters"])
            for r in self.records:
                w.writerow([r.step, f"{r.time:.17g}", f"{r.J:.17g}", f"{r.w_h1_norm:.17g}", r.dofs, r.iters])

    def monotone_violations(self, rel_tol: float = 1e-8) -> list[int]:
        """Steps whose J exceeds the previous value by more than ``rel_tol * J_0``."""
        J = self.J
        if len(J) < 2:
            return []
        slack = rel_tol * abs(J[0])
        return [int(self.records[n + 1].step) for n in np.flatnonzero(np.diff(J) > slack)]


@dataclass(frozen=True, eq=False)
class Operator:
    """Stabilized operator of one configuration with a reusable solve."""

    matrix: object
    solver: str
    tol: float
    _lu: fem.Factorized | None = None

    @classmethod
    def build(cls, matrix, solver: str, tol: float) -> Operator:
        lu = fem.Factorized(matrix, tol=max(tol, 1e-10)) if solver == "direct" else None
        return cls(matrix, solver, tol, lu)

    def solve(self, b) -> tuple[np.ndarray, int]:
        b = np.asarray(b, dtype=float)
        if self._lu is not None:
            return self._lu(b), 1
        if b.ndim == 1:
            x, info = fem.solve_with_info(self.matrix, b, tol=self.tol, method="cg")
            return x, info.iterations
        cols, its = [], 0
        for c in range(b.shape[1]):
            x, info = fem.solve_with_info(self.matrix, b[:, c], tol=self.tol, method="cg")
            cols.append(x)
            its += info.iterations
        return np.stack(cols, axis=1), its


def discretize(grid: UniformGrid, spline: ClosedSpline, disc: Discretization) -> tuple[CutMesh, fem.DofMap, fem.Integrator]:
    mesh = classify(grid, spline, spacing=grid.h / disc.subdivision)
    dofmap = fem.build_space(mesh, disc.k)
    return mesh, dofmap, fem.Integrator(dofmap, order=disc.order)


def build_operator(dofmap: fem.DofMap, integ: fem.Integrator, disc: Discretization) -> Operator:
    A = fem.assemble_operator(dofmap, alpha=disc.alpha, integrator=integ)
    return Operator.build(A, disc.solver, disc.tol)


def _problem_data(problem: ShapeProblem, pts: np.ndarray):
    x, y = pts[:, 0], pts[:, 1]
    return (np.asarray(problem.f(x, y), float), np.asarray(problem.grad_f(x, y), float),
            np.asarray(problem.u_d(x, y), float), np.asarray(problem.grad_ud(x, y), float))


def solve_state(mesh: CutMesh, spline: ClosedSpline | None, problem: ShapeProblem, k: int = 2,
                alpha: float = 1.0, *, integrator: fem.Integrator | None = None,
                operator: Operator | None = None) -> fem.FeField:
    """Stabilized solution of ``−Δu + u = f`` with natural boundary conditions."""
    dm, integ, op = _context(mesh, k, alpha, integrator, operator)
    pts = integ.points
    b = integ.load(scalar=np.asarray(problem.f(pts[:, 0], pts[:, 1]), float))
    return fem.FeField(dm, op.solve(b)[0])


def solve_adjoint(mesh: CutMesh, spline: ClosedSpline | None, problem: ShapeProblem, u_h: fem.FeField,
                  k: int = 2, alpha: float = 1.0, *, integrator: fem.Integrator | None = None,
                  operator: Operator | None = None) -> fem.FeField:
    """Adjoint with source ``u_h − u_d``."""
    dm, integ, op = _context(mesh, k, alpha, integrator, operator)
    pts = integ.points
    uv, _ = integ.values(u_h.coefficients)
    src = uv - np.asarray(problem.u_d(pts[:, 0], pts[:, 1]), float)
    return fem.FeField(dm, op.solve(integ.load(scalar=src))[0])


def _context(mesh, k, alpha, integrator, operator):
    if integrator is None:
        dm = fem.build_space(mesh, k)
        integrator = fem.Integrator(dm)
    dm = integrator.dofmap
    if operator is None:
        operator = build_operator(dm, integrator, Discretization(k=dm.k, alpha=alpha))
    return dm, integrator, operator


def shape_derivative_integrands(problem: ShapeProblem, pts, uv, ug, pv, pg):
    """Volume form of ``dJ(χ)`` for ``χ = φ e_c`` as (scalar, vector) integrand pairs.

    ``dJ(φ e_c) = ∫ s_c φ + v_c · ∇φ`` with
    ``s_c = p ∂_c f − (u − u_d) ∂_c u_d`` and
    ``v_c = ∂_c u ∇p + ∂_c p ∇u + S e_c``,
    ``S = ½(u − u_d)² − ∇u·∇p − u p + f p``.
    """
    f, gf, ud, gud = _problem_data(problem, pts)
    r = uv - ud
    S = 0.5 * r * r - np.einsum("nd,nd->n", ug, pg) - uv * pv + f * pv
    out = []
    for c in range(2):
        scalar = pv * gf[:, c] - r * gud[:, c]
        vector = ug[:, c:c + 1] * pg + pg[:, c:c + 1] * ug
        vector[:, c] += S
        out.append((scalar, vector))
    return out


def shape_derivative_load(mesh: CutMesh, spline: ClosedSpline | None, problem: ShapeProblem,
                          u_h: fem.FeField, p_h: fem.FeField, *,
                          integrator: fem.Integrator | None = None) -> np.ndarray:
    """``dJ(Γ, u_h, p_h; φ_i e_c)`` for every dof ``i`` and component ``c``; shape (n_dofs, 2)."""
    integ = integrator if integrator is not None else fem.Integrator(u_h.dofmap)
    uv, ug = integ.values(u_h.coefficients)
    pv, pg = integ.values(p_h.coefficients)
    parts = shape_derivative_integrands(problem, integ.points, uv, ug, pv, pg)
    return np.stack([integ.load(scalar=s, vector=v) for s, v in parts], axis=1)


def shape_derivative(problem: ShapeProblem, integ: fem.Integrator, u_h, p_h, velocity: Callable) -> float:
    """``dJ(Γ, u_h, p_h; v)`` for an analytic velocity ``v(x, y) -> (n, 2)`` with its Jacobian.

    ``velocity`` returns ``(v, Dv)`` with ``Dv[n, a, b] = ∂_b v_a``.
    """
    pts = integ.points
    uv, ug = integ.values(u_h.coefficients)
    pv, pg = integ.values(p_h.coefficients)
    f, gf, ud, gud = _problem_data(problem, pts)
    v, Dv = velocity(pts[:, 0], pts[:, 1])
    r = uv - ud
    S = 0.5 * r * r - np.einsum("nd,nd->n", ug, pg) - uv * pv + f * pv
    sym = 0.5 * (Dv + np.transpose(Dv, (0, 2, 1)))
    dens = (2.0 * np.einsum("na,nab,nb->n", ug, sym, pg) + pv * np.einsum("nd,nd->n", gf, v)
            + S * np.trace(Dv, axis1=1, axis2=2) - r * np.einsum("nd,nd->n", gud, v))
    return float(integ.integrate(dens))


def solve_velocity(mesh: CutMesh, spline: ClosedSpline | None, load: np.ndarray, k: int = 2,
                   alpha: float = 1.0, *, dofmap: fem.DofMap | None = None,
                   integrator: fem.Integrator | None = None, operator: Operator | None = None) -> fem.FeField:
    """Velocity ``w`` with ``A_h(w, χ) = −dJ(χ)``, two copies of the scalar operator."""
    if integrator is None and dofmap is not None:
        integrator = fem.Integrator(dofmap)
    dm, integ, op = _context(mesh, k, alpha, integrator, operator)
    return fem.FeField(dm, op.solve(-np.asarray(load))[0])


def tracking_value(problem: ShapeProblem, integ: fem.Integrator, u_h: fem.FeField) -> float:
    pts = integ.points
    uv, _ = integ.values(u_h.coefficients)
    r = uv - np.asarray(problem.u_d(pts[:, 0], pts[:, 1]), float)
    return float(0.5 * integ.integrate(r * r))


def active_h1_norm(field: fem.FeField) -> float:
    """H¹ norm over the whole active patch (all active cells, full squares)."""
    dm = field.dofmap
    K, M = fem.reference_matrices(dm.k, dm.k + 1)
    local = K + dm.mesh.h ** 2 * M
    c = np.asarray(field.coefficients)[dm.cell_dofs]
    if c.ndim == 2:
        c = c[..., None]
    return float(np.sqrt(max(np.einsum("nac,ab,nbc->", c, local, c), 0.0)))


def solve_configuration(problem: ShapeProblem, grid: UniformGrid, spline: ClosedSpline,
                        disc: Discretization) -> tuple[CutMesh, Fields]:
    """All solves of one step (classify, state, adjoint, load, velocity)."""
    mesh, dm, integ = discretize(grid, spline, disc)
    op = build_operator(dm, integ, disc)
    pts = integ.points
    f, gf, ud, gud = _problem_data(problem, pts)
    u, it_u = op.solve(integ.load(scalar=f))
    uv, ug = integ.values(u)
    p, it_p = op.solve(integ.load(scalar=uv - ud))
    pv, pg = integ.values(p)
    parts = shape_derivative_integrands(problem, pts, uv, ug, pv, pg)
    load = np.stack([integ.load(scalar=s, vector=v) for s, v in parts], axis=1)
    w, it_w = op.solve(-load)
    r = uv - ud
    J = float(0.5 * integ.integrate(r * r))
    fields = Fields(dm, integ, fem.FeField(dm, u), fem.FeField(dm, p), fem.FeField(dm, w), load, J,
                    it_u + it_p + it_w)
    return mesh, fields


def evaluate_J(problem: ShapeProblem, grid: UniformGrid, spline: ClosedSpline, disc: Discretization) -> float:
    """Discrete tracking functional of a configuration (state solve only)."""
    mesh, dm, integ = discretize(grid, spline, disc)
    op = build_operator(dm, integ, disc)
    pts = integ.points
    f, _, ud, _ = _problem_data(problem, pts)
    u, _ = op.solve(integ.load(scalar=f))
    uv, _ = integ.values(u)
    return float(0.5 * integ.integrate((uv - ud) ** 2))


def initial_state(problem: ShapeProblem, grid: UniformGrid, polygon: ControlPolygon,
                  disc: Discretization, time: float = 0.0, step: int = 0) -> FlowState:
    spline = fit_closed_spline(polygon.points)
    mesh, fields = solve_configuration(problem, grid, spline, disc)
    return FlowState(time, step, spline, mesh, fields)


def move_points(state: FlowState, tau: float) -> np.ndarray:
    """Control points after one explicit Euler step with the current velocity."""
    pts = state.spline.points
    grid = state.mesh.grid
    if not np.all(grid.contains_point(pts)):
        raise DomainEscape("a control point left the background box")
    vel = fem.eval_field(state.w, pts)
    return pts + tau * vel


@dataclass(frozen=True)
class ResamplePolicy:
    """Redistribute control points when chords degenerate or their count drifts."""

    target_spacing: float | None = None
    max_ratio: float = 3.0
    count_drift: float = 0.25

    def should_resample(self, spline: ClosedSpline) -> bool:
        if self.target_spacing is None:
            return False
        chords = spline.chords
        if chords.max() > self.max_ratio * chords.min():
            return True
        target = max(4, int(round(chords.sum() / self.target_spacing)))
        return abs(spline.n_segments - target) > self.count_drift * target


def advance(state: FlowState, tau: float, problem: ShapeProblem, disc: Discretization,
            policy: ResamplePolicy | None = None) -> FlowState:
    """One semi-implicit Euler step of the flow followed by all solves on the new boundary."""
    new_pts = move_points(state, tau)
    spline = fit_closed_spline(new_pts)
    if policy is not None and policy.should_resample(spline):
        spline = fit_closed_spline(resample(spline, policy.target_spacing).points)
    mesh, fields = solve_configuration(problem, state.mesh.grid, spline, disc)
    return FlowState(state.time + tau, state.step + 1, spline, mesh, fields)


def record_of(state: FlowState) -> TraceRecord:
    f = state.fields
    return TraceRecord(state.step, state.time, f.J, active_h1_norm(f.w), f.dofmap.n_dofs, f.iterations,
                       state.spline.n_segments)


def run(problem: ShapeProblem, polygon: ControlPolygon, grid: UniformGrid, tau: float, n_steps: int,
        disc: Discretization = Discretization(), eta_target: float | None = None,
        snapshot_every: int = 0, out_dir=None, progress: Callable | None = None) -> FlowTrace:
    """``n_steps`` flow steps of size ``tau`` from ``polygon``.

    Failures are re-raised as :class:`StepFailure` carrying the step index.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if n_steps < 0:
        raise ValueError("number of steps must be non-negative")
    policy = ResamplePolicy(eta_target)
    trace = FlowTrace()
    try:
        state = initial_state(problem, grid, polygon, disc)
    except CutFlowError as err:
        raise StepFailure(0, err, trace) from err

    def keep(st: FlowState):
        trace.records.append(record_of(st))
        if snapshot_every and (st.step % snapshot_every == 0 or st.step == n_steps):
            trace.snapshots[st.step] = st.spline.points.copy()
            if out_dir is not None:
                write_polygon_csv(os.path.join(out_dir, f"boundary_{st.step}.csv"), st.spline.points)
        if progress is not None:
            progress(st, trace)

    keep(state)
    for n in range(1, n_steps + 1):
        try:
            state = advance(state, tau, problem, disc, policy)
        except CutFlowError as err:
            raise StepFailure(n, err, trace) from err
        # times are n * tau exactly rather than accumulated sums
        state = replace(state, time=n * tau)
        keep(state)
    trace.final = state
    return trace
