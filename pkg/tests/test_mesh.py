from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cutflow.errors import DomainEscape
from cutflow.mesh import (CUT, INSIDE, OUTSIDE, UniformGrid, check_reachability, classify, edge_cells,
                          ghost_edges)
from cutflow.spline import contains, fit_closed_spline

from conftest import circle_points

GRID8 = UniformGrid.square(0.0, 3.0, 8)


def subsample_status(grid, spline, n=32):
    """Brute-force oracle: Cut when an n x n sub-sample of the closed cell has mixed membership."""
    nx, ny = grid.cells
    s = np.linspace(0.0, 1.0, n)
    lat = np.stack(np.meshgrid(s, s, indexing="ij"), -1).reshape(-1, 2) * grid.h
    out = np.zeros((nx, ny), dtype=int)
    for i in range(nx):
        for j in range(ny):
            pts = np.array(grid.origin) + grid.h * np.array([i, j]) + lat
            inside = contains(spline, pts)
            out[i, j] = CUT if inside.any() and not inside.all() else (INSIDE if inside.all() else OUTSIDE)
    return out


def test_grid_geometry():
    assert GRID8.h == pytest.approx(3 / 8)
    with pytest.raises(ValueError):
        UniformGrid((0, 0), (3, 2), (8, 8))


def test_far_cells(circle64):
    mesh = classify(GRID8, circle64)
    i, j = GRID8.locate(np.array([[1.5 + 1e-3, 1.5 + 1e-3], [0.1, 0.1]]))
    assert mesh.status[i[0], j[0]] == INSIDE
    assert mesh.status[i[1], j[1]] == OUTSIDE


def test_cut_count_matches_oracle(circle64):
    mesh = classify(GRID8, circle64)
    oracle = subsample_status(GRID8, circle64)
    assert len(mesh.cut) == int(np.count_nonzero(oracle == CUT))
    assert np.array_equal(mesh.status, oracle)


def test_escape_raises():
    sp = fit_closed_spline(circle_points(64, center=(1.0, 1.5)))
    with pytest.raises(DomainEscape):
        classify(GRID8, sp)


def test_csv_dump(tmp_path, circle64):
    mesh = classify(GRID8, circle64)
    mesh.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "cell_i,cell_j,status" and len(lines) == 65


def brute_force_ghost_edges(status):
    nx, ny = status.shape
    act = status != OUTSIDE
    rows = []
    for axis, (di, dj) in enumerate(((1, 0), (0, 1))):
        for i in range(nx - di):
            for j in range(ny - dj):
                a, b = (i, j), (i + di, j + dj)
                if act[a] and act[b] and (status[a] == CUT or status[b] == CUT):
                    rows.append((axis, i, j))
    return sorted(rows)


def test_ghost_edges_match_predicate(circle64):
    mesh = classify(GRID8, circle64)
    edges = ghost_edges(mesh)
    assert [tuple(r) for r in edges] == brute_force_ghost_edges(np.asarray(mesh.status))
    assert len({tuple(r) for r in edges}) == len(edges)


def test_single_cut_cell_has_four_ghost_edges():
    from cutflow.mesh import _ghost_edges
    status = np.full((5, 5), INSIDE, dtype=np.int8)
    status[2, 2] = CUT
    edges = {tuple(r) for r in _ghost_edges(status)}
    assert edges == {(0, 1, 2), (0, 2, 2), (1, 2, 1), (1, 2, 2)}


def test_fringe_edge_not_ghost():
    from cutflow.mesh import _ghost_edges
    status = np.array([[OUTSIDE, CUT, INSIDE]], dtype=np.int8).T  # cells (0,0), (1,0), (2,0)
    edges = {tuple(r) for r in _ghost_edges(status)}
    assert (0, 0, 0) not in edges and (0, 1, 0) in edges


def test_reachability_unit_circle(circle64):
    report = check_reachability(classify(GRID8, circle64))
    assert report.flagged == []
    mesh = classify(GRID8, circle64)
    first, second = edge_cells(mesh)
    status = mesh.status.ravel()
    for c, d in report.chain_length.items():
        neighbours = np.r_[second[first == c], first[second == c]]
        if np.any(status[neighbours] == INSIDE):
            assert d <= 1


def test_reachability_sliver():
    # radius 0.535 clips the corners (1.125, 1.125) etc. at distance 0.5303 by a sliver
    from cutflow.quadrature import cut_rules
    sp = fit_closed_spline(circle_points(256, radius=0.535))
    mesh = classify(GRID8, sp)
    fraction = dict(zip(mesh.cut.tolist(), cut_rules(mesh, 2).cell_measures() / GRID8.h ** 2))
    report = check_reachability(mesh)
    for i, j in ((2, 2), (2, 5), (5, 2), (5, 5)):
        c = int(GRID8.flat(i, j))
        assert fraction[c] < 1e-3
        assert report.chain_length[c] >= 2


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 1.1), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.sampled_from([8, 16]))
def test_property_classification(radius, dx, dy, n):
    grid = UniformGrid.square(0.0, 3.0, n)
    sp = fit_closed_spline(circle_points(128, radius=radius, center=(1.5 + dx, 1.5 + dy)))
    mesh = classify(grid, sp)
    status = np.asarray(mesh.status)
    assert set(mesh.active) == set(np.flatnonzero(status.ravel() != OUTSIDE))
    assert set(mesh.cut) <= set(mesh.active)
    # agreement with the sub-sampling oracle away from the curve
    h = grid.h
    centers = np.array(grid.origin) + h * (np.argwhere(np.ones_like(status, bool)) + 0.5)
    dist = np.abs(np.linalg.norm(centers - np.array([1.5 + dx, 1.5 + dy]), axis=1) - radius)
    far = (dist > h / np.sqrt(2) + h / 16).reshape(status.shape)
    oracle = subsample_status(grid, sp, n=8) if n == 8 else None
    inside_far = np.linalg.norm(centers - np.array([1.5 + dx, 1.5 + dy]), axis=1).reshape(status.shape) < radius
    assert np.all(status[far & inside_far] == INSIDE)
    assert np.all(status[far & ~inside_far] == OUTSIDE)
    if oracle is not None:
        assert np.array_equal(status[far], oracle[far])
    # refinement: children of Inside cells are never Outside
    fine = classify(UniformGrid.square(0.0, 3.0, 2 * n), sp).status
    for i, j in np.argwhere(status == INSIDE):
        assert np.all(np.asarray(fine)[2 * i:2 * i + 2, 2 * j:2 * j + 2] != OUTSIDE)
