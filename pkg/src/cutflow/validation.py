"""Independent oracles: dense-subsampling areas, finite-difference shape gradients,
manufactured-solution rates and golden trajectories.

The area oracle only uses the exact spline inside test and never touches the
clipping quadrature; the finite-difference oracle re-solves the state on
perturbed splines and never uses the shape-derivative formula.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import fem
from .flow import Discretization, ShapeProblem, evaluate_J, solve_configuration
from .mesh import UniformGrid, classify
from .spline import ClosedSpline, contains, fit_closed_spline, polyline


@dataclass(frozen=True)
class OracleReport:
    """``passed`` holds iff ``|measured - reference| <= tolerance`` entrywise.

    With ``relative`` set, the difference is divided by ``scale`` (default
    ``|reference|``) before the comparison.
    """

    name: str
    measured: np.ndarray
    reference: np.ndarray
    tolerance: np.ndarray
    relative: bool = False
    scale: np.ndarray | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("measured", "reference", "tolerance"):
            object.__setattr__(self, key, np.atleast_1d(np.asarray(getattr(self, key), dtype=float)))
        if self.scale is not None:
            object.__setattr__(self, "scale", np.atleast_1d(np.asarray(self.scale, dtype=float)))

    @property
    def deviation(self) -> np.ndarray:
        d = np.abs(self.measured - self.reference)
        if self.relative:
            s = np.abs(self.reference) if self.scale is None else self.scale
            d = d / np.where(s > 0, s, 1.0)
        return d

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite(self.measured)) and np.all(self.deviation <= self.tolerance))

    def line(self) -> str:
        kind = "rel" if self.relative else "abs"
        fmt = lambda a: " ".join(f"{v:.6g}" for v in a)
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: measured [{fmt(self.measured)}] "
                f"reference [{fmt(self.reference)}] {kind} deviation [{fmt(self.deviation)}] "
                f"tolerance [{fmt(self.tolerance)}]")


# area oracle ----------------------------------------------------------------------------

def area_oracle_tolerance(h: float, subsamples_per_axis: int) -> float:
    """Stated per-cell accuracy of :func:`area_oracle` for a boundary crossing a cell once.

    Only sub-cells the curve crosses can be misclassified; their number is
    about ``sqrt(2) * n`` for a straight crossing, each contributing at most
    half a sub-cell area on average.
    """
    return float(np.sqrt(2.0) * h * h / subsamples_per_axis)


def area_oracle(spline: ClosedSpline, grid: UniformGrid, subsamples_per_axis: int = 64) -> np.ndarray:
    """Per-cell area of ``Ω ∩ K`` by counting sub-cell midpoints inside the spline; shape (nx, ny).

    Cells the curve cannot reach are decided by a single inside test at the
    centre; the rest are sub-sampled on an ``n x n`` midpoint lattice.
    """
    n = int(subsamples_per_axis)
    if n < 32:
        raise ValueError("subsamples_per_axis must be >= 32")
    nx, ny = grid.cells
    h = grid.h
    # a dense sample of the curve marks every cell it can pass through
    per_seg = max(8, int(np.ceil(spline.chords.max() / (0.25 * h))))
    trace = polyline(spline, per_seg)
    i, j = grid.locate(trace)
    near = np.zeros((nx, ny), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            near[np.clip(i + di, 0, nx - 1), np.clip(j + dj, 0, ny - 1)] = True
    out = np.zeros((nx, ny))
    far = np.argwhere(~near)
    if len(far):
        centres = np.array(grid.origin) + h * (far + 0.5)
        out[far[:, 0], far[:, 1]] = np.where(contains(spline, centres), h * h, 0.0)
    sub = (np.arange(n) + 0.5) / n
    lattice = np.stack(np.meshgrid(sub, sub, indexing="ij"), axis=-1).reshape(-1, 2) * h
    cells = np.argwhere(near)
    chunk = max(1, 2_000_000 // (n * n))
    for s in range(0, len(cells), chunk):
        block = cells[s:s + chunk]
        origins = np.array(grid.origin) + h * block
        pts = (origins[:, None, :] + lattice[None, :, :]).reshape(-1, 2)
        inside = np.asarray(contains(spline, pts)).reshape(len(block), -1)
        out[block[:, 0], block[:, 1]] = inside.sum(axis=1) * (h / n) ** 2
    return out


# finite-difference shape gradient -------------------------------------------------------

def fd_shape_gradient_oracle(problem: ShapeProblem, spline: ClosedSpline, velocity: Callable, eps_list,
                             grid: UniformGrid, disc: Discretization = Discretization(),
                             tolerance: float = 1e-3, scale: float | None = None,
                             name: str = "fd shape gradient") -> OracleReport:
    """Distributed ``dJ(v)`` against central differences of ``J`` under ``x -> x + ε v(x)``.

    ``velocity(pts) -> (n, 2)``. The distributed value contracts the
    shape-derivative load with the nodal interpolant of ``v``; each
    perturbed configuration moves the control points and refits the spline.
    The reported FD value is the one of the ε with the smallest mismatch;
    the mismatch is relative to ``max(|FD|, scale)``.
    """
    _, fields = solve_configuration(problem, grid, spline, disc)
    nodal = np.asarray(velocity(fields.dofmap.nodes), dtype=float)
    dj = float(np.sum(fields.load * nodal))
    pts = spline.points
    vp = np.asarray(velocity(pts), dtype=float)
    fds = []
    for eps in eps_list:
        jp = evaluate_J(problem, grid, fit_closed_spline(pts + eps * vp), disc)
        jm = evaluate_J(problem, grid, fit_closed_spline(pts - eps * vp), disc)
        fds.append((jp - jm) / (2.0 * eps))
    fds = np.array(fds)
    floor = 0.0 if scale is None else float(scale)
    mism = np.abs(dj - fds) / np.maximum(np.maximum(np.abs(fds), floor), np.finfo(float).tiny)
    best = int(np.argmin(mism))
    spread = float(np.ptp(fds)) if len(fds) > 1 else 0.0
    return OracleReport(name, dj, fds[best], tolerance, relative=True,
                        scale=max(abs(fds[best]), floor) if max(abs(fds[best]), floor) > 0 else 1.0,
                        details={"eps": list(eps_list), "fd": fds.tolist(), "best_eps": eps_list[best],
                                 "fd_spread": spread, "J": fields.J})


# manufactured rates ---------------------------------------------------------------------

def _unit_circle_spline(n: int = 256, center=(1.5, 1.5)) -> ClosedSpline:
    t = 2 * np.pi * np.arange(n) / n
    return fit_closed_spline(np.asarray(center) + np.stack([np.cos(t), np.sin(t)], axis=1))


def manufactured_errors(k: int = 2, levels=(0, 1, 2, 3), exact: str = "example1",
                        disc: Discretization | None = None, spline: ClosedSpline | None = None):
    """L² and H¹ errors of the stabilized state solve on a fixed circle; returns (h, l2, h1).

    ``exact="example1"`` uses ``u = (1 - r²)²``, ``f = r⁴ - 18 r² + 9`` around
    ``(1.5, 1.5)``, which has a vanishing normal derivative on the unit circle;
    ``exact="constant"`` uses ``u = f = 1``.
    """
    from .problems import grad_target, source, target

    disc = disc if disc is not None else Discretization(k=k)
    spline = spline if spline is not None else _unit_circle_spline()
    if exact == "example1":
        f, u, gu = source, target, grad_target
    elif exact == "constant":
        f = lambda x, y: np.ones_like(x)
        u = lambda x, y: np.ones_like(x)
        gu = lambda x, y: np.zeros(np.shape(x) + (2,))
    else:
        raise ValueError(f"unknown manufactured solution {exact!r}")
    hs, l2, h1 = [], [], []
    for lev in levels:
        grid = UniformGrid.square(0.0, 3.0, 8 * 2 ** lev)
        mesh = classify(grid, spline, spacing=grid.h / disc.subdivision)
        dm = fem.build_space(mesh, k)
        integ = fem.Integrator(dm, order=disc.order)
        A = fem.assemble_operator(dm, alpha=disc.alpha, integrator=integ)
        pts = integ.points
        b = integ.load(scalar=np.asarray(f(pts[:, 0], pts[:, 1]), float))
        coef = fem.solve(A, b, tol=1e-11, method="direct")
        v, g = integ.values(coef)
        e = v - u(pts[:, 0], pts[:, 1])
        ge = g - gu(pts[:, 0], pts[:, 1])
        hs.append(grid.h)
        l2.append(np.sqrt(integ.integrate(e * e)))
        h1.append(np.sqrt(integ.integrate((ge * ge).sum(axis=1))))
    return np.array(hs), np.array(l2), np.array(h1)


def manufactured_rate_suite(k: int = 2, levels=(0, 1, 2, 3), disc: Discretization | None = None,
                            l2_band: tuple[float, float] = (2.6, 3.4),
                            h1_band: tuple[float, float] = (1.65, 2.35)) -> OracleReport:
    """Pairwise observed L² and H¹ orders of the manufactured solution against their bands."""
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    hs, l2, h1 = manufactured_errors(k, levels, disc=disc)
    ratio = np.log(hs[:-1] / hs[1:])
    o2 = np.log(l2[:-1] / l2[1:]) / ratio
    o1 = np.log(h1[:-1] / h1[1:]) / ratio
    m = len(o2)
    ref = np.r_[np.full(m, sum(l2_band) / 2), np.full(m, sum(h1_band) / 2)]
    tol = np.r_[np.full(m, (l2_band[1] - l2_band[0]) / 2), np.full(m, (h1_band[1] - h1_band[0]) / 2)]
    return OracleReport(f"manufactured rates k={k} (L2 orders, then H1 orders)", np.r_[o2, o1], ref, tol,
                        details={"h": hs.tolist(), "l2": l2.tolist(), "h1": h1.tolist()})


# golden trajectories --------------------------------------------------------------------

def golden_trajectory(example_id: int, level: int = 0, n_steps: int | None = None, plan=None) -> dict:
    """J values of a flow run rounded to 6 significant digits, plus the failure step (or None)."""
    from .errors import StepFailure
    from .problems import LevelPlan, get_example, run_level

    plan = plan if plan is not None else LevelPlan()
    rows: list = []

    def keep(state, trace):
        rows[:] = [r.J for r in trace.records]

    failure = None
    try:
        trace = run_level(get_example(example_id), level, plan, progress=keep, n_steps=n_steps)
        rows = [r.J for r in trace.records]
    except StepFailure as err:
        failure = err.step
    return {"J": [float(f"{v:.6g}") for v in rows], "failed_at": failure}


def write_golden(path, golden: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "J"])
        for n, v in enumerate(golden["J"]):
            w.writerow([n, f"{v:.6g}"])
        if golden["failed_at"] is not None:
            w.writerow([golden["failed_at"], "failed"])


def read_golden(path) -> dict:
    values, failed = [], None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["J"] == "failed":
                failed = int(row["step"])
            else:
                values.append(float(row["J"]))
    return {"J": values, "failed_at": failed}


def compare_golden(name: str, measured: dict, golden: dict) -> OracleReport:
    n = max(len(measured["J"]), len(golden["J"]))
    pad = lambda a: np.r_[a, np.full(n - len(a), np.nan)]
    m, g = pad(measured["J"]), pad(golden["J"])
    same_failure = measured["failed_at"] == golden["failed_at"]
    if not same_failure:
        m = np.r_[m, np.nan]
        g = np.r_[g, 0.0]
    return OracleReport(name, m, g, 1e-6, relative=True,
                        details={"failed_at": measured["failed_at"], "golden_failed_at": golden["failed_at"]})


# suite ----------------------------------------------------------------------------------

def default_suite(quick: bool = False) -> list[OracleReport]:
    """The reports printed by the ``validate`` command."""
    from .problems import CENTER, TRACKING, LevelPlan, ellipse, equispaced_polygon

    reports = []
    # area oracle on the disk and the cut rules against it
    circle = _unit_circle_spline()
    grid = UniformGrid.square(0.0, 3.0, 64)
    ref = area_oracle(circle, grid, 128)
    reports.append(OracleReport("area oracle total, unit circle, 128 subsamples", ref.sum(), np.pi, 2e-3))
    from .quadrature import cut_cell_rule, Cell
    mesh = classify(grid, circle)
    i, j = grid.unflat(mesh.cut)
    cut_area = np.array([cut_cell_rule(Cell(*grid.cell_origin(c), grid.h), circle, depth=6).measure
                         for c in mesh.cut])
    total = cut_area.sum() + grid.h ** 2 * np.count_nonzero(mesh.status == 2)
    reports.append(OracleReport("cut quadrature total area, h=3/64 depth 6", total, np.pi, 1e-5))
    tol = 3 * area_oracle_tolerance(grid.h, 128)
    reports.append(OracleReport("cut quadrature vs area oracle, max per cut cell",
                                np.abs(cut_area - ref[i, j]).max(), 0.0, tol))
    # shape gradient against finite differences on the level-0 ellipse
    plan = LevelPlan()
    g0 = plan.grid(0)
    spl = fit_closed_spline(equispaced_polygon(ellipse, plan.eta(0)).points)
    c = np.asarray(CENTER)
    radial = fd_shape_gradient_oracle(TRACKING, spl, lambda P: P - c, (1e-3, 1e-4, 1e-5), g0,
                                      plan.discretization(), name="fd shape gradient, radial, ellipse")
    reports.append(radial)
    # by symmetry the translation derivatives vanish; compare on the radial scale
    for name, v in (("x", (1.0, 0.0)), ("y", (0.0, 1.0))):
        reports.append(fd_shape_gradient_oracle(
            TRACKING, spl, lambda P, v=v: np.broadcast_to(v, P.shape), (1e-3, 1e-4, 1e-5), g0,
            plan.discretization(), scale=abs(radial.reference[0]),
            name=f"fd shape gradient, translation {name}, ellipse"))
    if not quick:
        reports.append(manufactured_rate_suite())
        _, l2, h1 = manufactured_errors(levels=(0, 1, 2), exact="constant")
        reports.append(OracleReport("manufactured constant solution errors", np.r_[l2, h1], 0.0, 1e-10))
    return reports
