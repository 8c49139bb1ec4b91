"""Tests for the state, adjoint, shape derivative, velocity and flow loop."""

from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cutflow import fem
from cutflow.errors import StepFailure
from cutflow.flow import (ShapeProblem, active_h1_norm, advance, discretize,
                          initial_state, move_points, run, shape_derivative, shape_derivative_load,
                          solve_adjoint, solve_configuration, solve_state, solve_velocity, tracking_value)
from cutflow.problems import TRACKING, LevelPlan, ellipse, equispaced_polygon, get_example
from cutflow.spline import ControlPolygon, fit_closed_spline

from conftest import CENTER, circle_points

PLAN = LevelPlan()
DISC = PLAN.discretization()


def _const(c):
    return lambda x, y: np.full(np.shape(x), float(c))


def _zero_grad(x, y):
    return np.zeros(np.shape(x) + (2,))


def _problem(f, ud):
    return ShapeProblem(_const(f), _zero_grad, _const(ud), _zero_grad, name="constant")


@pytest.fixture(scope="module")
def ellipse_setup():
    grid = PLAN.grid(1)
    spline = fit_closed_spline(equispaced_polygon(ellipse, PLAN.eta(1)).points)
    mesh, dm, integ = discretize(grid, spline, DISC)
    return grid, spline, mesh, dm, integ


@pytest.fixture(scope="module")
def circle_states():
    states = {}
    for level in (0, 1, 2):
        n = max(16, int(round(2 * np.pi / PLAN.eta(level))))
        states[level] = initial_state(TRACKING, PLAN.grid(level), ControlPolygon(circle_points(n)), DISC)
    return states


# data derivatives

def test_problem_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(0, 3, 100), rng.uniform(0, 3, 100)
    eps = 1e-6
    for fn, grad in ((TRACKING.f, TRACKING.grad_f), (TRACKING.u_d, TRACKING.grad_ud)):
        fd = np.stack([(fn(x + eps, y) - fn(x - eps, y)) / (2 * eps),
                       (fn(x, y + eps) - fn(x, y - eps)) / (2 * eps)], axis=-1)
        g = grad(x, y)
        scale = np.maximum(np.abs(g), 1.0)
        assert np.max(np.abs(fd - g) / scale) <= 1e-6


# state and adjoint

def test_state_of_unit_source_is_one(ellipse_setup):
    _, spline, mesh, dm, integ = ellipse_setup
    u = solve_state(mesh, spline, _problem(1, 0), integrator=integ)
    assert np.max(np.abs(u.coefficients - 1.0)) <= 1e-8


def test_state_of_zero_source_is_zero(ellipse_setup):
    _, spline, mesh, dm, integ = ellipse_setup
    u = solve_state(mesh, spline, _problem(0, 0), integrator=integ)
    assert np.max(np.abs(u.coefficients)) == 0.0


def test_adjoint_vanishes_when_state_matches_target(ellipse_setup):
    _, spline, mesh, dm, integ = ellipse_setup
    prob = _problem(1, 1)
    u = solve_state(mesh, spline, prob, integrator=integ)
    p = solve_adjoint(mesh, spline, prob, u, integrator=integ)
    assert np.max(np.abs(p.coefficients)) <= 1e-8


def test_adjoint_of_unit_source_is_one(ellipse_setup):
    _, spline, mesh, dm, integ = ellipse_setup
    prob = _problem(1, 0)  # u_h = 1 so the adjoint source u_h - u_d is 1
    u = solve_state(mesh, spline, prob, integrator=integ)
    p = solve_adjoint(mesh, spline, prob, u, integrator=integ)
    assert np.max(np.abs(p.coefficients - 1.0)) <= 1e-8


def test_state_and_adjoint_rates_at_unit_circle(circle_states):
    hs = np.array([PLAN.h(lev) for lev in circle_states])
    u_err, p_norm = [], []
    for state in circle_states.values():
        integ = state.fields.integrator
        uv, _ = integ.values(state.u.coefficients)
        ud = TRACKING.u_d(integ.points[:, 0], integ.points[:, 1])
        u_err.append(np.sqrt(integ.integrate((uv - ud) ** 2)))
        pv, pg = integ.values(state.p.coefficients)
        p_norm.append(np.sqrt(integ.integrate(pv ** 2 + np.sum(pg ** 2, axis=1))))
    u_ord = np.diff(np.log(u_err)) / np.diff(np.log(hs))
    p_ord = np.diff(np.log(p_norm)) / np.diff(np.log(hs))
    # both behave like h^3
    assert np.all(u_ord >= 2.5), u_ord
    assert np.all(p_ord >= 2.5), p_ord


# shape derivative

def test_load_vanishes_at_stationary_data(ellipse_setup):
    _, spline, mesh, dm, integ = ellipse_setup
    prob = _problem(1, 1)
    u = solve_state(mesh, spline, prob, integrator=integ)
    p = solve_adjoint(mesh, spline, prob, u, integrator=integ)
    load = shape_derivative_load(mesh, spline, prob, u, p, integrator=integ)
    assert np.max(np.abs(load)) <= 1e-8
    w = solve_velocity(mesh, spline, load, integrator=integ)
    assert np.max(np.abs(w.coefficients)) <= 1e-8


def test_velocity_of_zero_load_is_zero(ellipse_setup):
    _, spline, mesh, dm, integ = ellipse_setup
    w = solve_velocity(mesh, spline, np.zeros((dm.n_dofs, 2)), integrator=integ)
    assert np.all(w.coefficients == 0.0)


def test_load_is_linear_in_the_test_function(ellipse_setup):
    grid, spline, mesh, dm, integ = ellipse_setup
    _, fields = solve_configuration(TRACKING, grid, spline, DISC)
    load = fields.load
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, dm.n_dofs, 2))
    pair = lambda c: np.sum(load * c)  # noqa: E731
    assert pair(a + b) == pytest.approx(pair(a) + pair(b), rel=1e-12, abs=1e-12 * np.abs(load).sum())

    # the load contracted with an interpolated field equals the analytic-velocity form
    def vel(x, y):
        v = np.stack([np.sin(x) * y, x * x - y], axis=-1)
        Dv = np.empty(x.shape + (2, 2))
        Dv[:, 0, 0], Dv[:, 0, 1] = np.cos(x) * y, np.sin(x)
        Dv[:, 1, 0], Dv[:, 1, 1] = 2 * x, -1.0
        return v, Dv

    interp = fem.interpolate(dm, lambda x, y: vel(x, y)[0]).coefficients
    exact = shape_derivative(TRACKING, fields.integrator, fields.u, fields.p, vel)
    assert pair(interp) == pytest.approx(exact, rel=2e-3)


def _descent_gap(fields):
    w = np.asarray(fields.w.coefficients)
    A = fem.assemble_operator(fields.dofmap, alpha=DISC.alpha, integrator=fields.integrator)
    dJ = float(np.sum(fields.load * w))
    energy = float(sum(w[:, c] @ (A @ w[:, c]) for c in range(2)))
    return dJ, energy


@settings(max_examples=6, deadline=None)
@given(a=st.floats(0.9, 1.3), b=st.floats(0.6, 1.0), dx=st.floats(-0.15, 0.15), phase=st.floats(0, 3.0))
def test_descent_identity_random_configurations(a, b, dx, phase):
    grid = PLAN.grid(1)
    theta = np.linspace(0, 2 * np.pi, 40, endpoint=False) + phase
    pts = np.stack([CENTER[0] + dx + a * np.cos(theta), CENTER[1] + b * np.sin(theta)], axis=1)
    _, fields = solve_configuration(TRACKING, grid, fit_closed_spline(pts), DISC)
    dJ, energy = _descent_gap(fields)
    assert energy > 0
    assert abs(dJ + energy) <= 1e-10 * energy


# advancing

def test_zero_velocity_keeps_the_boundary(ellipse_setup):
    grid, spline, mesh, dm, integ = ellipse_setup
    state = initial_state(TRACKING, grid, ControlPolygon(spline.points), DISC)
    frozen = replace(state, fields=replace(state.fields, w=fem.FeField(dm, np.zeros((dm.n_dofs, 2)))))
    new = advance(frozen, 0.1, TRACKING, DISC)
    assert np.array_equal(new.spline.points, spline.points)
    assert new.J_value == pytest.approx(state.J_value, rel=1e-13)


def test_constant_velocity_translates_the_points(ellipse_setup):
    grid, spline, mesh, dm, integ = ellipse_setup
    state = initial_state(TRACKING, grid, ControlPolygon(spline.points), DISC)
    w = np.zeros((state.fields.dofmap.n_dofs, 2))
    w[:, 0] = 0.5
    forced = replace(state, fields=replace(state.fields, w=fem.FeField(state.fields.dofmap, w)))
    moved = move_points(forced, 0.2)
    assert np.allclose(moved - spline.points, [0.1, 0.0], atol=1e-12)


def test_level0_first_step_decreases_J():
    ex = get_example(1)
    grid = PLAN.grid(0)
    state = initial_state(TRACKING, grid, ex.initial_polygon(PLAN.eta(0)), DISC)
    new = advance(state, PLAN.tau(0), TRACKING, DISC)
    assert new.J_value < state.J_value


def test_level1_first_steps_recorded_and_descend_after_transient():
    trace = run(TRACKING, get_example(1).initial_polygon(PLAN.eta(1)), PLAN.grid(1), PLAN.tau(1), 20,
                disc=DISC, eta_target=PLAN.eta(1))
    assert len(trace.records) == 21
    dt = np.diff(trace.times)
    assert np.all(dt > 0) and np.allclose(dt, PLAN.tau(1), rtol=1e-12)
    assert trace.J[-1] < trace.J[0]


# run loop

def test_run_with_no_steps_returns_initial_record(tmp_path):
    poly = get_example(1).initial_polygon(PLAN.eta(1))
    trace = run(TRACKING, poly, PLAN.grid(1), PLAN.tau(1), 0, disc=DISC, snapshot_every=1, out_dir=tmp_path)
    assert len(trace.records) == 1
    assert trace.records[0].step == 0 and trace.records[0].time == 0.0
    assert (tmp_path / "boundary_0.csv").exists()
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "time", "J", "w_h1_norm", "dofs", "iters"]
    assert float(rows[1][2]) == trace.records[0].J


def test_run_rejects_bad_parameters():
    poly = get_example(1).initial_polygon(0.3)
    with pytest.raises(ValueError):
        run(TRACKING, poly, PLAN.grid(0), 0.0, 1)
    with pytest.raises(ValueError):
        run(TRACKING, poly, PLAN.grid(0), 0.1, -1)


def test_run_reports_failing_step():
    # a huge step throws the boundary out of the box
    poly = get_example(1).initial_polygon(PLAN.eta(1))
    with pytest.raises(StepFailure) as info:
        run(TRACKING, poly, PLAN.grid(1), 50.0, 3, disc=DISC)
    assert info.value.step >= 1
    assert info.value.trace is not None and len(info.value.trace.records) == info.value.step


def test_stored_J_matches_recomputation(ellipse_setup):
    grid, spline, *_ = ellipse_setup
    _, fields = solve_configuration(TRACKING, grid, spline, DISC)
    again = tracking_value(TRACKING, fields.integrator, fields.u)
    assert abs(again - fields.J) <= 1e-12 * max(1.0, abs(fields.J))


def test_monotone_violations_detects_increase():
    from cutflow.flow import FlowTrace, TraceRecord

    tr = FlowTrace([TraceRecord(n, 0.1 * n, J, 0.0, 1, 1, 4) for n, J in enumerate([1.0, 0.5, 0.6, 0.4])])
    assert tr.monotone_violations() == [2]
    flat = FlowTrace([TraceRecord(n, 0.1 * n, 1.0 + 1e-10 * n, 0.0, 1, 1, 4) for n in range(3)])
    assert flat.monotone_violations() == []


# stationarity at the unit circle

def test_velocity_decays_at_the_optimal_circle(circle_states):
    hs = [PLAN.h(lev) for lev in circle_states]
    norms = [active_h1_norm(s.w) for s in circle_states.values()]
    orders = np.diff(np.log(norms)) / np.diff(np.log(hs))
    assert np.all(orders >= 1.5), orders


def test_one_step_at_the_circle_moves_points_by_at_most_tau_sup_w(circle_states):
    for level, state in circle_states.items():
        tau = PLAN.tau(level)
        moved = move_points(state, tau)
        shift = np.linalg.norm(moved - state.spline.points, axis=1)
        vals = np.linalg.norm(fem.eval_field(state.w, state.fields.integrator.points), axis=1)
        sup = max(vals.max(), np.linalg.norm(fem.eval_field(state.w, state.spline.points), axis=1).max())
        # subtracting the old positions costs a few ulps of |p|
        assert shift.max() <= tau * sup + 8 * np.finfo(float).eps * 3.0
