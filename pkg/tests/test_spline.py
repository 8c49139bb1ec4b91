from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import CubicSpline

from cutflow.errors import InvalidBoundary
from cutflow.geometry import points_in_polygon, signed_area
from cutflow.spline import (ControlPolygon, contains, evaluate, fit_closed_spline, polyline,
                            read_polygon_csv, resample, write_polygon_csv)

from conftest import CENTER, circle_points


def star_points(n, amp, lobes, phase=0.0):
    t = 2 * np.pi * np.arange(n) / n
    r = 1.0 + amp * np.sin(lobes * t + phase)
    return CENTER + r[:, None] * np.stack([np.cos(t), np.sin(t)], axis=1)


def test_four_point_knots():
    sp = fit_closed_spline(circle_points(4))
    s2 = np.sqrt(2.0)
    assert np.allclose(sp.knots[:4], [0, s2, 2 * s2, 3 * s2], atol=1e-14)
    assert sp.span == pytest.approx(4 * s2, abs=1e-14)


def test_too_few_points():
    with pytest.raises(InvalidBoundary):
        fit_closed_spline(circle_points(3))


def test_self_intersecting_polygon():
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1], [0.5, -0.5]], float)
    with pytest.raises(InvalidBoundary):
        ControlPolygon(bowtie)


def test_repeated_point():
    pts = circle_points(8)
    pts[3] = pts[2]
    with pytest.raises(InvalidBoundary):
        ControlPolygon(pts)


def test_interpolates_knots(circle64):
    pts, _ = evaluate(circle64, circle64.knots[:-1] if len(circle64.knots) > 64 else circle64.knots)
    assert np.abs(pts - circle64.points).max() <= 1e-12 * 2.5


def test_midpoints_near_circle(circle64):
    mid = circle64.knots[:64] + 0.5 * circle64.chords
    pts, _ = evaluate(circle64, mid)
    assert np.abs(np.linalg.norm(pts - CENTER, axis=1) - 1).max() < 1e-4


def test_periodic_wrap(circle64):
    a, da = evaluate(circle64, 0.0)
    b, db = evaluate(circle64, circle64.span)
    assert np.allclose(a, b, atol=1e-13) and np.allclose(da, db, atol=1e-12)


def test_matches_scipy_periodic_spline():
    # independent implementation of the same chord-length periodic cubic
    pts = star_points(37, 0.2, 3)
    sp = fit_closed_spline(pts)
    closed = np.vstack([pts, pts[:1]])
    knots = np.r_[0, np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))]
    ref = CubicSpline(knots, closed, bc_type="periodic")
    s = np.linspace(0, knots[-1], 1001)
    p, d = evaluate(sp, s)
    assert np.abs(p - ref(s)).max() < 1e-12
    assert np.abs(d - ref(s, 1)).max() < 1e-10
    assert np.abs(sp(s, 2) - ref(s, 2)).max() < 1e-8


def test_contains_examples(circle64):
    assert contains(circle64, (1.5, 1.5))
    assert not contains(circle64, (0.1, 0.1))
    assert contains(circle64, (2.49, 1.5))


def test_polyline_examples(circle64):
    assert np.allclose(polyline(circle64, 1), circle64.points)
    poly = polyline(circle64, 8)
    assert len(poly) == 64 * 8
    per = np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1).sum()
    # a 512-gon inscribed in the exact circle already misses 2π by 3.9e-5
    inscribed = 2 * 512 * np.sin(np.pi / 512)
    assert abs(per - inscribed) < 1e-5
    assert abs(per - 2 * np.pi) < 5e-5
    dense = polyline(circle64, 64)
    assert abs(signed_area(dense) - np.pi) < 1e-5
    assert abs(circle64.area - np.pi) < 1e-5


def test_resample_uniform(circle64):
    new = resample(circle64, 2 * np.pi / 64)
    assert len(new) == 64
    sp = fit_closed_spline(new.points)
    dense = polyline(sp, 64)
    arcs = np.linalg.norm(np.roll(dense, -1, 0) - dense, axis=1).reshape(64, 64).sum(axis=1)
    assert np.ptp(arcs) / arcs.mean() < 0.05


def test_resample_clamped(circle64):
    assert len(resample(circle64, circle64.arclength)) == 4


def test_resample_preserves_area(circle64):
    sp = fit_closed_spline(resample(circle64, circle64.arclength / 32).points)
    assert abs(sp.area - circle64.area) < 1e-4


def test_csv_round_trip(tmp_path):
    pts = star_points(20, 0.1, 2)
    write_polygon_csv(tmp_path / "b.csv", pts)
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "x,y"
    assert np.array_equal(read_polygon_csv(tmp_path / "b.csv").points, pts)


shapes = st.tuples(st.integers(12, 60), st.floats(0.0, 0.3), st.integers(1, 4), st.floats(0, 6.28))


@settings(max_examples=30, deadline=None)
@given(shapes)
def test_property_interpolation_and_smoothness(shape):
    pts = star_points(*shape)
    sp = fit_closed_spline(pts)
    p, _ = evaluate(sp, sp.knots[: sp.n_segments])
    assert np.all(np.linalg.norm(p - pts, axis=1) <= 1e-10 * (1 + np.linalg.norm(pts, axis=1)))
    for nu in (1, 2):
        a, b = sp(0.0, nu), sp(sp.span, nu)
        assert np.linalg.norm(a - b) <= 1e-8 * (1 + np.linalg.norm(a))


@settings(max_examples=30, deadline=None)
@given(shapes, st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
def test_property_translation_equivariance(shape, dx, dy):
    pts = star_points(*shape)
    shift = np.array([dx, dy])
    a, b = fit_closed_spline(pts), fit_closed_spline(pts + shift)
    s = np.linspace(0, a.span, 97)
    assert np.abs(b(s) - (a(s) + shift)).max() <= 1e-12 * 10


@settings(max_examples=25, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_property_contains_matches_winding(shape, seed):
    pts = star_points(*shape)
    sp = fit_closed_spline(pts)
    dense = polyline(sp, 64)
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.2, 2.8, size=(400, 2))
    seg_a, seg_b = dense, np.roll(dense, -1, axis=0)
    d = seg_b - seg_a
    t = np.clip(np.einsum("qnd,nd->qn", q[:, None, :] - seg_a[None], d) / (d * d).sum(1), 0, 1)
    dist = np.linalg.norm(q[:, None, :] - (seg_a[None] + t[..., None] * d[None]), axis=2).min(axis=1)
    keep = dist > 3.0 / 8.0 / 100
    assert np.array_equal(contains(sp, q[keep]), points_in_polygon(dense, q[keep]))
