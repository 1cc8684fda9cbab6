import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpems import scenario as sc
from conftest import SQUARE_DOC, square_doc, square_spec

SCEN_DIR = __import__("pathlib").Path(__file__).resolve().parents[1] / "scenarios"


# -- independent point-in-polygon oracle (boundary counts as inside) --------


def _on_segment(px, py, ax, ay, bx, by, eps=1e-12):
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > eps:
        return False
    return min(ax, bx) - eps <= px <= max(ax, bx) + eps and min(ay, by) - eps <= py <= max(ay, by) + eps


def point_in_polygon(px, py, poly):
    n = len(poly)
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        if _on_segment(px, py, ax, ay, bx, by):
            return True
    inside = False
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        if (ay > py) != (by > py):
            xc = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < xc:
                inside = not inside
    return inside


def brute_mask(regions, grid):
    X, Y = grid.mesh()
    out = np.zeros(grid.shape, dtype=bool)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            out[i, j] = any(point_in_polygon(X[i, j], Y[i, j], r) for r in regions)
    return out


# -- loading ---------------------------------------------------------------


def test_square_scenario_loads():
    spec = sc.load_scenario(SCEN_DIR / "square_10.json")
    assert spec.shape == (10, 10)
    assert spec.height_d == 5.0
    assert spec.obs.shape == (60, 75)
    fp = spec.footprints[0]
    assert fp.mask.sum() == 10 * 10  # samples at half-meter offsets, 10 per side
    assert set(np.unique(fp.level_db)) == {-10.0, -50.0}


@pytest.mark.parametrize("path", sorted(SCEN_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_scenarios_load(path):
    spec = sc.load_scenario(path)
    assert spec.n_steps >= 1


def test_zero_cells_rejected_with_field_name(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(square_doc(m=0)))
    with pytest.raises(sc.ScenarioError, match="m_cells must be ≥ 1"):
        sc.load_scenario(p)


def test_default_seed_is_zero():
    doc = square_doc()
    doc.pop("rng_seed", None)
    assert sc.scenario_from_dict(doc).rng_seed == 0


def test_default_solver_blocks_applied():
    spec = square_spec()
    assert spec.solver == sc.DEFAULT_SOLVER
    doc = square_doc(solver={"qipm": {"max_iters": 7}})
    spec = sc.scenario_from_dict(doc)
    assert spec.solver["qipm"]["max_iters"] == 7
    assert spec.solver["qipm"]["conv_threshold"] == sc.DEFAULT_SOLVER["qipm"]["conv_threshold"]


def test_unknown_solver_field_rejected():
    with pytest.raises(sc.ScenarioError, match="solver.qipm.bogus"):
        sc.scenario_from_dict(square_doc(solver={"qipm": {"bogus": 1}}))


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "m_cells": 10,\n  "n_cells": ,\n}')
    with pytest.raises(sc.ScenarioError, match="line 3"):
        sc.load_scenario(p)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        sc.load_scenario("/nonexistent/scenario.json")


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"cell_dx": 0.0}, "cell_dx"),
        ({"height_d": -1.0}, "height_d"),
        ({"obs": {"x_range": [0.5, 74.5], "y_range": [0.5, 59.5], "nx": 1, "ny": 60}}, "nx"),
        ({"obs": {"x_range": [-1.0, 74.5], "y_range": [0.5, 59.5], "nx": 75, "ny": 60}}, "x_range"),
        ({"footprints": []}, "footprints"),
    ],
)
def test_invariant_violation_names_field(patch, field):
    with pytest.raises(sc.ScenarioError, match=field):
        sc.scenario_from_dict(square_doc(**patch))


def test_levels_must_be_ordered():
    doc = square_doc()
    doc["footprints"][0]["level_in_db"] = -60.0
    with pytest.raises(sc.ScenarioError, match="level_in_db"):
        sc.scenario_from_dict(doc)


def test_self_intersecting_polygon_rejected():
    grid = square_spec().obs
    bowtie = [[0, 0], [10, 10], [10, 0], [0, 10]]
    with pytest.raises(sc.ScenarioError, match="self-intersecting"):
        sc.build_desired_footprint([bowtie], -10, -50, grid)


def test_angles_converted_from_degrees():
    doc = square_doc(incident={"theta_inc": 30.0, "phi_inc": 45.0, "e_perp": 1.0, "e_par": [0.0, 1.0]})
    w = sc.scenario_from_dict(doc).incident
    assert w.theta_inc == pytest.approx(math.pi / 6, abs=1e-15)
    assert w.phi_inc == pytest.approx(math.pi / 4, abs=1e-15)
    assert w.e_par == 1j


def test_dict_round_trip():
    spec = square_spec()
    again = sc.scenario_from_dict(sc.scenario_to_dict(spec))
    assert sc.scenario_to_dict(again) == sc.scenario_to_dict(spec)
    assert np.array_equal(again.footprints[0].mask, spec.footprints[0].mask)


# -- footprint masks -------------------------------------------------------


def test_single_square_levels():
    spec = square_spec()
    fp = spec.footprints[0]
    X, Y = spec.obs.mesh()
    inside = (np.abs(X - 25) <= 5) & (np.abs(Y - 30) <= 5)
    assert np.array_equal(fp.mask, inside)
    assert np.all(fp.level_db[inside] == -10.0)
    assert np.all(fp.level_db[~inside] == -50.0)


def test_empty_region_list():
    grid = square_spec().obs
    fp = sc.build_desired_footprint([], -10, -50, grid)
    assert not fp.mask.any()
    assert np.all(fp.level_db == -50.0)


def test_overlapping_squares_match_brute_force():
    grid = square_spec().obs
    regions = [sc.square((25.0, 30.0), 10.0), sc.square((30.0, 33.0), 8.0)]
    fp = sc.build_desired_footprint(regions, -10, -50, grid)
    assert np.array_equal(fp.mask, brute_mask(regions, grid))


def test_concave_polygon_matches_brute_force():
    grid = square_spec().obs
    ell = [[10.5, 10.2], [30.3, 10.2], [30.3, 20.0], [20.0, 20.0], [20.0, 40.7], [10.5, 40.7]]
    tri = [[40.0, 40.0], [60.0, 45.0], [45.0, 55.5]]
    fp = sc.build_desired_footprint([ell, tri], -10, -50, grid)
    assert np.array_equal(fp.mask, brute_mask([ell, tri], grid))


polygons = st.lists(
    st.tuples(st.floats(1, 74), st.floats(1, 59)), min_size=3, max_size=3
).filter(lambda p: abs((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])) > 1.0)


@settings(max_examples=40, deadline=None)
@given(polygons)
def test_mask_independent_of_orientation(tri):
    grid = sc.ObservationGrid((0.5, 74.5), (0.5, 59.5), 75, 60)
    a = sc.build_desired_footprint([list(tri)], -10, -50, grid)
    b = sc.build_desired_footprint([list(reversed(tri))], -10, -50, grid)
    assert np.array_equal(a.mask, b.mask)
    assert set(np.unique(a.level_db)) <= {-10.0, -50.0}


# -- geometry --------------------------------------------------------------


def test_broadside_point():
    r, th, ph = sc.global_to_local((10.0, 0.0, 5.0), 5.0)
    assert (r, th, ph) == (10.0, 0.0, 0.0)


def test_coverage_center_radius():
    r, _, _ = sc.global_to_local((25.0, 30.0, 0.0), 5.0)
    assert r == pytest.approx(math.sqrt(25**2 + 30**2 + 5**2), rel=1e-15)


def test_half_space_and_singular_errors():
    with pytest.raises(ValueError, match="half-space"):
        sc.global_to_local((0.0, 1.0, 0.0), 5.0)
    with pytest.raises(ValueError, match="half-space"):
        sc.global_to_local((-3.0, 1.0, 0.0), 5.0)


coords = st.tuples(st.floats(1e-3, 200), st.floats(-200, 200), st.floats(-200, 200))


@settings(max_examples=200, deadline=None)
@given(coords, st.floats(0.1, 20))
def test_local_round_trip(p, d):
    r, th, ph = sc.global_to_local(p, d)
    back = sc.local_to_global(r, th, ph, d)
    assert np.max(np.abs(back - np.array(p))) <= 1e-10
    assert r == pytest.approx(math.sqrt(p[0] ** 2 + p[1] ** 2 + (p[2] - d) ** 2), rel=1e-14)


def test_round_trip_vectorized(rng):
    pts = np.column_stack([rng.uniform(0.01, 100, 500), rng.uniform(-100, 100, 500), rng.uniform(-100, 100, 500)])
    r, th, ph = sc.global_to_local(pts, 5.0)
    assert np.max(np.abs(sc.local_to_global(r, th, ph, 5.0) - pts)) <= 1e-10


def test_cell_center_examples():
    one = square_spec(1)
    assert sc.cell_center(1, 1, one) == (0.0, 0.0)
    two = sc.scenario_from_dict(square_doc(2, cell_dx=0.04))
    assert sc.cell_center(1, 1, two)[0] == pytest.approx(-0.02, abs=1e-17)
    assert sc.cell_center(2, 1, two)[0] == pytest.approx(0.02, abs=1e-17)
    with pytest.raises(IndexError):
        sc.cell_center(3, 1, two)
    with pytest.raises(IndexError):
        sc.cell_center(0, 1, two)


@pytest.mark.parametrize("m", [1, 2, 3, 7, 10, 31])
def test_cell_grid_centered_and_tiles_aperture(m):
    spec = square_spec(m, m + 1)
    assert abs(spec.cell_x.sum()) <= 1e-12 * m
    assert abs(spec.cell_y.sum()) <= 1e-12 * m
    # adjacent supports share an edge; the union spans exactly M dx by N dy
    lo = spec.cell_x - spec.cell_dx / 2
    hi = spec.cell_x + spec.cell_dx / 2
    assert np.allclose(hi[:-1], lo[1:], atol=1e-15)
    assert hi[-1] - lo[0] == pytest.approx(m * spec.cell_dx, rel=1e-12)
    for i in range(1, m + 1):
        assert sc.cell_center(i, 1, spec)[0] == spec.cell_x[i - 1]


def test_incident_basis_orthonormal():
    for th, ph in [(0.0, 0.0), (0.0, 0.7), (math.radians(30), 0.3), (1.2, -2.0)]:
        w = sc.IncidentWave(th, ph, 1.0, 1.0, 3.5e9)
        k = w.k_inc / w.k0
        e1, e2 = w.e_perp_hat, w.e_par_hat
        for a, b in [(k, e1), (k, e2), (e1, e2)]:
            assert abs(a @ b) < 1e-14
        assert np.linalg.norm(e1) == pytest.approx(1.0)
        assert np.linalg.norm(e2) == pytest.approx(1.0)
        assert abs(w.e_par_ref_hat @ (w.k_ref / w.k0)) < 1e-14
        assert np.allclose(w.e_par_ref_hat[:2], w.e_par_hat[:2], atol=1e-15)


def test_square_doc_fixture_untouched():
    assert SQUARE_DOC["m_cells"] == 10
