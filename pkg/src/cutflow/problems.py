"""Benchmark problems, refinement levels, error metrics and the convergence harness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, fields as dc_fields, replace
from typing import Callable

import numpy as np

from . import fem
from .errors import StepFailure
from .flow import Discretization, FlowState, FlowTrace, ShapeProblem, initial_state, run
from .geometry import ccw, points_in_polygon
from .mesh import UniformGrid
from .quadrature import ORACLE_DEPTH, clipped_rules
from .spline import (ClosedSpline, ControlPolygon, boundary_resolution, fit_closed_spline, read_polygon_csv,
                     sample_boundary, write_polygon_csv)

CENTER = (1.5, 1.5)
BOX = (0.0, 3.0)


def _r2(x, y):
    return (x - CENTER[0]) ** 2 + (y - CENTER[1]) ** 2


def source(x, y):
    r2 = _r2(x, y)
    return r2 * r2 - 18.0 * r2 + 9.0


def grad_source(x, y):
    g = 4.0 * _r2(x, y) - 36.0
    return np.stack([g * (x - CENTER[0]), g * (y - CENTER[1])], axis=-1)


def target(x, y):
    return (1.0 - _r2(x, y)) ** 2


def grad_target(x, y):
    g = -4.0 * (1.0 - _r2(x, y))
    return np.stack([g * (x - CENTER[0]), g * (y - CENTER[1])], axis=-1)


TRACKING = ShapeProblem(source, grad_source, target, grad_target, name="circle-tracking")


def ellipse(theta, a: float = 1.3, b: float = 0.85):
    return np.stack([CENTER[0] + a * np.cos(theta), CENTER[1] + b * np.sin(theta)], axis=-1)


def three_lobed(theta):
    r = 1.2 * (2.0 / (8.0 + 6.0 * np.sin(3.0 * theta + 3.0 * np.pi / 36.0))) ** (1.0 / 6.0)
    return np.stack([CENTER[0] + r * np.cos(theta), CENTER[1] + r * np.sin(theta)], axis=-1)


def circle(theta, radius: float = 1.0, center=CENTER):
    return np.stack([center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)], axis=-1)


def equispaced_polygon(curve: Callable, spacing: float, dense: int = 20000) -> ControlPolygon:
    """Points on a closed parametric curve, equally spaced in arclength, about ``spacing`` apart."""
    theta = np.linspace(0.0, 2.0 * np.pi, dense + 1)
    pts = curve(theta)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(4, int(round(s[-1] / spacing)))
    targets = s[-1] * np.arange(n) / n
    th = np.interp(targets, s, theta)
    return ControlPolygon(curve(th))


@dataclass(frozen=True)
class ExampleSpec:
    id: int
    problem: ShapeProblem
    curve: Callable
    description: str

    def initial_polygon(self, spacing: float) -> ControlPolygon:
        return equispaced_polygon(self.curve, spacing)


EXAMPLES = {
    1: ExampleSpec(1, TRACKING, ellipse, "ellipse with semi-axes 1.3 and 0.85"),
    2: ExampleSpec(2, TRACKING, three_lobed, "three-lobed curve"),
}


def get_example(example_id: int) -> ExampleSpec:
    try:
        return EXAMPLES[int(example_id)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown example {example_id!r}; choose from {sorted(EXAMPLES)}") from None


@dataclass(frozen=True)
class LevelPlan:
    """Refinement schedule ``h_i = h0 / 2^i``, ``tau_i = T / (steps0 * 4^i)``, ``eta_i = h_i^eta_power``."""

    T: float = 40.0
    h0: float = 3.0 / 8.0
    steps0: int = 625
    k: int = 2
    alpha: float = 1.0
    eta_power: float = 2.5
    eta_scale: float = 1.0
    subdivision: int = 16
    solver: str = "direct"
    tol: float = 1e-10
    resample: bool = True
    snapshot_every: int = 0

    def h(self, level: int) -> float:
        return self.h0 / 2 ** level

    def n_cells(self, level: int) -> int:
        return int(round((BOX[1] - BOX[0]) / self.h(level)))

    def n_steps(self, level: int) -> int:
        return self.steps0 * 4 ** level

    def tau(self, level: int) -> float:
        return self.T / self.n_steps(level)

    def eta(self, level: int) -> float:
        return self.eta_scale * self.h(level) ** self.eta_power

    def grid(self, level: int) -> UniformGrid:
        return UniformGrid.square(BOX[0], BOX[1], self.n_cells(level))

    def discretization(self) -> Discretization:
        return Discretization(k=self.k, alpha=self.alpha, subdivision=self.subdivision,
                              solver=self.solver, tol=self.tol)

    # key=value configuration files
    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in dc_fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: LevelPlan | None = None) -> LevelPlan:
        base = base if base is not None else cls()
        types = {f.name: type(getattr(base, f.name)) for f in dc_fields(cls)}
        updates = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {n}: unknown key {key!r}")
            updates[key] = _parse_value(value, types[key], key)
        return replace(base, **updates)

    @classmethod
    def from_file(cls, path, base: LevelPlan | None = None) -> LevelPlan:
        with open(path) as fh:
            return cls.from_text(fh.read(), base)


def _parse_value(value: str, kind: type, key: str):
    value = value.strip().strip("'\"")
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            if "/" in value:
                num, den = value.split("/", 1)
                return float(num) / float(den)
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"bad value for {key}: {value!r}") from None


def run_level(example: ExampleSpec, level: int, plan: LevelPlan = LevelPlan(), out_dir=None,
              progress=None, n_steps: int | None = None) -> FlowTrace:
    """Flow of ``example`` with the settings of refinement ``level``."""
    eta = plan.eta(level)
    polygon = example.initial_polygon(eta)
    steps = plan.n_steps(level) if n_steps is None else n_steps
    return run(example.problem, polygon, plan.grid(level), plan.tau(level), steps,
               disc=plan.discretization(), eta_target=eta if plan.resample else None,
               snapshot_every=plan.snapshot_every, out_dir=out_dir, progress=progress)


# geometric error ----------------------------------------------------------------------

def _circle_cell_areas(grid: UniformGrid, center, radius: float) -> np.ndarray:
    """Exact area of ``disk ∩ K`` for every grid cell, shape (nx, ny)."""
    nx, ny = grid.cells
    h = grid.h
    xs = grid.origin[0] + h * np.arange(nx + 1) - center[0]
    ys = grid.origin[1] + h * np.arange(ny + 1) - center[1]
    # F(x, y) = area of {disk, X <= x, Y <= y}; rectangle area by inclusion-exclusion
    F = _disk_quadrant_area(xs[:, None], ys[None, :], radius)
    return F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]


def _disk_quadrant_area(x, y, r: float) -> np.ndarray:
    x = np.clip(x, -r, r)
    y = np.clip(y, -r, r)
    return _below(x, y, r)


def _antiderivative(t, r):
    """∫_0^t sqrt(r² − s²) ds."""
    t = np.clip(t, -r, r)
    return 0.5 * (t * np.sqrt(np.maximum(r * r - t * t, 0.0)) + r * r * np.arcsin(t / r))


def _below(x, y, r):
    """Area of ``{X² + Y² < r², X <= x, Y <= y}`` for ``|x|, |y| <= r``.

    Integrates over X the length of ``{Y <= y} ∩ (-q, q)``, ``q = sqrt(r² − X²)``:
    ``y + q`` where ``|X| < X*`` (``X* = sqrt(r² − y²)``), otherwise ``2q`` when
    ``y >= 0`` and ``0`` when ``y < 0``.
    """
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    A = _antiderivative
    xs = np.sqrt(np.maximum(r * r - y * y, 0.0))
    m = np.clip(x, -xs, xs)
    middle = y * (m + xs) + A(m, r) - A(-xs, r)
    outer = 2.0 * ((A(np.minimum(x, -xs), r) - A(-r, r)) + (A(np.maximum(x, xs), r) - A(xs, r)))
    return middle + np.where(y >= 0, outer, 0.0)


def spline_cell_areas(spline: ClosedSpline, grid: UniformGrid, depth: int = ORACLE_DEPTH,
                      order: int = 2) -> np.ndarray:
    """Area of ``Ω_η ∩ K`` per grid cell from the clipped-polygon rule at ``h / 2**depth``."""
    poly = ccw(sample_boundary(spline, boundary_resolution(spline, grid.h / 2 ** depth)))
    nx, ny = grid.cells
    lo = np.floor((poly.min(axis=0) - np.array(grid.origin)) / grid.h).astype(int)
    hi = np.ceil((poly.max(axis=0) - np.array(grid.origin)) / grid.h).astype(int)
    lo = np.clip(lo, 0, [nx - 1, ny - 1])
    hi = np.clip(hi, 1, [nx, ny])
    ii, jj = np.meshgrid(np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]), indexing="ij")
    flat = grid.flat(ii.ravel(), jj.ravel())
    rules = clipped_rules(poly, grid.cell_origin(flat), grid.h, order, cells=flat)
    areas = np.zeros(grid.n_cells)
    areas[flat] = rules.cell_measures()
    return areas.reshape(nx, ny)


def geometric_error(spline: ClosedSpline, reference=None, grid: UniformGrid | None = None,
                    depth: int = ORACLE_DEPTH) -> float:
    """``Σ_K |area(Ω_ref ∩ K) − area(Ω_η ∩ K)|``.

    ``reference`` is another spline or ``("circle", center, radius)``; the
    default is the unit circle at the centre of the box.
    """
    if grid is None:
        raise ValueError("a grid is required")
    mine = spline_cell_areas(spline, grid, depth)
    if reference is None:
        reference = ("circle", CENTER, 1.0)
    if isinstance(reference, ClosedSpline):
        ref = spline_cell_areas(reference, grid, depth)
    else:
        _, center, radius = reference
        ref = _circle_cell_areas(grid, center, radius)
    return float(np.abs(ref - mine).sum())


def observed_order(errors, h_values) -> list[float | None]:
    """``log(e_{i-1}/e_i) / log(h_{i-1}/h_i)``; ``None`` when an error is not positive."""
    errors = list(errors)
    h_values = list(h_values)
    if len(errors) != len(h_values):
        raise ValueError("errors and h values differ in length")
    out: list[float | None] = []
    for i in range(1, len(errors)):
        e0, e1 = errors[i - 1], errors[i]
        if e0 is None or e1 is None or not (e0 > 0 and e1 > 0):
            out.append(None)
        else:
            out.append(math.log(e0 / e1) / math.log(h_values[i - 1] / h_values[i]))
    return out


# convergence study ----------------------------------------------------------------------

@dataclass
class LevelResult:
    """Outcome of one flow run; ``final_points`` is ``None`` when the run failed."""

    example: int
    level: int
    h: float
    final_points: np.ndarray | None
    trace_rows: list  # (step, time, J, w_h1_norm, dofs, iters)
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.final_points is not None


def plan_key(plan: LevelPlan) -> str:
    text = replace(plan, snapshot_every=0).to_text()
    return hashlib.sha1(text.encode()).hexdigest()[:12]


def _result_dir(cache_dir, example_id: int, level: int, plan: LevelPlan) -> str:
    return os.path.join(cache_dir, f"example{example_id}_level{level}_{plan_key(plan)}")


def _read_trace_rows(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            rows.append((int(r["step"]), float(r["time"]), float(r["J"]), float(r["w_h1_norm"]),
                         int(r["dofs"]), int(r["iters"])))
    return rows


def load_result(cache_dir, example_id: int, level: int, plan: LevelPlan) -> LevelResult | None:
    d = _result_dir(cache_dir, example_id, level, plan)
    meta_path = os.path.join(d, "meta.json")
    if not os.path.exists(meta_path):
        return None
    with open(meta_path) as fh:
        meta = json.load(fh)
    rows = _read_trace_rows(os.path.join(d, "trace.csv")) if os.path.exists(os.path.join(d, "trace.csv")) else []
    pts = None
    if meta.get("failure") is None:
        pts = read_polygon_csv(os.path.join(d, "final.csv")).points
    return LevelResult(example_id, level, plan.h(level), pts, rows, meta.get("failure"))


def save_result(cache_dir, result: LevelResult, plan: LevelPlan) -> str:
    d = _result_dir(cache_dir, result.example, result.level, plan)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "J", "w_h1_norm", "dofs", "iters"])
        for r in result.trace_rows:
            w.writerow([r[0], f"{r[1]:.17g}", f"{r[2]:.17g}", f"{r[3]:.17g}", r[4], r[5]])
    if result.final_points is not None:
        write_polygon_csv(os.path.join(d, "final.csv"), result.final_points)
    with open(os.path.join(d, "plan.cfg"), "w") as fh:
        fh.write(plan.to_text())
    with open(os.path.join(d, "meta.json"), "w") as fh:
        json.dump({"example": result.example, "level": result.level, "h": result.h,
                   "failure": result.failure}, fh, indent=1)
    return d


def _rows_of(trace: FlowTrace) -> list:
    return [(r.step, r.time, r.J, r.w_h1_norm, r.dofs, r.iters) for r in trace.records]


def flow_result(example: ExampleSpec, level: int, plan: LevelPlan = LevelPlan(), cache_dir=None,
                progress=None) -> LevelResult:
    """Run (or load from ``cache_dir``) the flow of ``example`` at ``level``.

    A run that fails is recorded with its diagnostic instead of raising, so a
    study can still report the levels that did complete.
    """
    if cache_dir is not None:
        cached = load_result(cache_dir, example.id, level, plan)
        if cached is not None:
            return cached
    try:
        trace = run_level(example, level, plan, progress=progress)
        result = LevelResult(example.id, level, plan.h(level), trace.final.spline.points.copy(), _rows_of(trace))
    except StepFailure as err:
        rows = _rows_of(err.trace) if err.trace is not None else []
        result = LevelResult(example.id, level, plan.h(level), None, rows, str(err))
    if cache_dir is not None:
        save_result(cache_dir, result, plan)
    return result


def final_state(example: ExampleSpec, result: LevelResult, plan: LevelPlan) -> FlowState:
    """Re-solve all fields on the final boundary of a completed run."""
    if not result.ok:
        raise ValueError(f"level {result.level} did not complete: {result.failure}")
    return initial_state(example.problem, plan.grid(result.level), ControlPolygon(result.final_points),
                         plan.discretization(), time=plan.T, step=plan.n_steps(result.level))


def field_error(coarse: FlowState, reference: FlowState, which: str, order: int = 5) -> float:
    """H¹ distance of a coarse field to the reference field over the intersection of both domains.

    The integral uses a Gauss rule of ``order`` per axis on the coarse domain,
    restricted to points that also lie inside the reference boundary polygon.
    """
    integ = fem.Integrator(coarse.fields.dofmap, order=order)
    pts = integ.points
    inside = points_in_polygon(reference.mesh.boundary, pts)
    cf = getattr(coarse, which)
    rf = getattr(reference, which)
    cv, cg = integ.values(cf.coefficients)
    rv = fem.eval_field(rf, pts)
    rg = fem.eval_grad(rf, pts)
    dv = (cv - rv).reshape(len(pts), -1)
    dg = (cg - rg).reshape(len(pts), -1)
    dens = (dv ** 2).sum(axis=1) + (dg ** 2).sum(axis=1)
    return float(np.sqrt(np.sum(integ.weights * inside * dens)))


@dataclass
class ConvergenceTable:
    example: int
    levels: list
    h: list
    errors: dict  # name -> list of error or None
    orders: dict  # name -> list of order or None (first entry None)
    failures: dict  # level -> message

    COLUMNS = ("phi", "u", "p", "w")

    def finest_orders(self) -> dict:
        """Order of the last row with an order, per column."""
        out = {}
        for name in self.COLUMNS:
            vals = [o for o in self.orders[name] if o is not None]
            out[name] = vals[-1] if vals else None
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "err_phi", "ord_phi", "err_u", "ord_u", "err_p", "ord_p", "err_w", "ord_w"])
            for i, h in enumerate(self.h):
                row = [f"{h:.17g}"]
                for name in self.COLUMNS:
                    e = self.errors[name][i]
                    o = self.orders[name][i]
                    row += ["" if e is None else f"{e:.10g}", "" if o is None else f"{o:.4f}"]
                w.writerow(row)

    def format(self) -> str:
        lines = [f"{'h':>10}  {'order phi':>10} {'order u':>10} {'order p':>10} {'order w':>10}"]
        for i, h in enumerate(self.h):
            cells = []
            for name in self.COLUMNS:
                o = self.orders[name][i]
                cells.append(f"{'-' if o is None else f'{o:.4f}':>10}")
            lines.append(f"{h:>10.6g}  " + " ".join(cells))
        return "\n".join(lines)


def convergence_study(example: ExampleSpec, levels, reference_level: int | None = None,
                      plan: LevelPlan = LevelPlan(), cache_dir=None, progress=None,
                      phi_reference: str = "circle") -> ConvergenceTable:
    """Errors and observed orders of ``φ, u, p, w`` over refinement ``levels``.

    ``φ`` is measured by the geometric error on each level's grid, against
    the analytic unit circle (``phi_reference="circle"``) or against the final
    spline of ``reference_level`` (``"reference"``); ``u, p, w`` by the H¹
    distance to the solution of ``reference_level`` (default: the finest
    level, which then has no field errors of its own).
    """
    if phi_reference not in ("circle", "reference"):
        raise ValueError(f"unknown phi reference {phi_reference!r}")
    levels = list(levels)
    if not levels:
        raise ValueError("no levels given")
    if reference_level is None:
        reference_level = max(levels)
    if any(l > reference_level for l in levels):
        raise ValueError("the reference level must not be coarser than the studied levels")
    results = {}
    for lev in sorted(set(levels) | {reference_level}):
        results[lev] = flow_result(example, lev, plan, cache_dir=cache_dir, progress=progress)
    failures = {lev: r.failure for lev, r in results.items() if not r.ok}

    ref = results[reference_level]
    ref_state = final_state(example, ref, plan) if ref.ok else None
    err: dict = {name: [] for name in ConvergenceTable.COLUMNS}
    for lev in levels:
        res = results[lev]
        if not res.ok:
            for name in err:
                err[name].append(None)
            continue
        spline = fit_closed_spline(res.final_points)
        if phi_reference == "circle":
            err["phi"].append(geometric_error(spline, grid=plan.grid(lev)))
        elif ref.ok and lev != reference_level:
            err["phi"].append(geometric_error(spline, fit_closed_spline(ref.final_points), grid=plan.grid(lev)))
        else:
            err["phi"].append(None)
        if lev == reference_level or ref_state is None:
            for name in ("u", "p", "w"):
                err[name].append(None)
            continue
        state = final_state(example, res, plan)
        for name in ("u", "p", "w"):
            err[name].append(field_error(state, ref_state, name))
    hs = [plan.h(lev) for lev in levels]
    orders = {name: [None] + observed_order(vals, hs) for name, vals in err.items()}
    return ConvergenceTable(example.id, levels, hs, err, orders, failures)
