import numpy as np
import pytest

from breplat import synthgen
from breplat.solidify import (
    FitError,
    assemble_loops,
    assembly_to_model,
    build_solid,
    extract_mesh,
    fit_surface,
    orient_loops,
    select_best,
    solidify,
    solidify_model,
)


def _grid(fn):
    t = np.linspace(0, 1, 16)
    uu, vv = np.meshgrid(t, t, indexing="ij")
    return np.stack(fn(uu, vv), axis=-1)


# -- fitting ----------------------------------------------------------------


def test_fit_plane_exact():
    g = _grid(lambda u, v: (u, v, 0.3 * u + 0.1 * v - 0.2))
    assert fit_surface(g).residual <= 1e-9


def test_fit_quadratic_exact():
    g = _grid(lambda u, v: (u, v, u**2))
    assert fit_surface(g).residual <= 1e-9


def test_fit_rejects_nan():
    g = _grid(lambda u, v: (u, v, u * 0))
    g[3, 3, 2] = np.nan
    with pytest.raises(FitError):
        fit_surface(g)


def test_fit_evaluate_matches_samples():
    g = _grid(lambda u, v: (u, v, np.sin(u) * 0.2 + v**3 * 0.1))
    f = fit_surface(g)
    t = np.linspace(0, 1, 16)
    recon = f.evaluate_grid(16, 16)
    assert np.abs(recon - g).max() < 1e-4
    # pointwise evaluation agrees with the grid evaluation
    pts = f.evaluate(t, t)
    diag = recon[np.arange(16), np.arange(16)]
    assert np.allclose(pts, diag)


def test_projection_recovers_uv():
    g = _grid(lambda u, v: (u, v, 0 * u))
    f = fit_surface(g)
    queries = np.array([[0.25, 0.5, 0.0], [0.8, 0.1, 0.0]])
    uv, dist = f.project(queries)
    assert np.allclose(uv, [[0.25, 0.5], [0.8, 0.1]], atol=1e-6)
    assert dist.max() < 1e-8


# -- loops -------------------------------------------------------------------


def _square_curves(perturb=0.0, seed=0):
    corners = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    rng = np.random.default_rng(seed)
    curves = {}
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        pts = np.linspace(a, b, 16)
        if perturb:
            pts = pts + rng.uniform(-perturb, perturb, size=3) * np.array([1, 1, 0])
        curves[k] = pts
    return curves


def test_assemble_square_loop():
    loops = assemble_loops(0, _square_curves(), tau_e=0.1)
    assert len(loops) == 1
    assert loops[0].closed
    assert loops[0].role == "outer"
    assert loops[0].curve_ids == [0, 1, 2, 3]


def test_assemble_perturbed_loop_closes():
    # oracle: every endpoint gap is below tau by construction
    curves = _square_curves(perturb=0.03, seed=3)
    gaps = [np.linalg.norm(curves[(k + 1) % 4][0] - curves[k][-1]) for k in range(4)]
    assert max(gaps) <= 0.1
    loops = assemble_loops(0, curves, tau_e=0.1)
    assert len(loops) == 1 and loops[0].closed


def test_assemble_outer_and_hole():
    curves = _square_curves()
    inner = np.array([[0.3, 0.3, 0], [0.7, 0.3, 0], [0.7, 0.7, 0], [0.3, 0.7, 0]])
    for k in range(4):
        a, b = inner[k], inner[(k + 1) % 4]
        curves[4 + k] = np.linspace(a, b, 16)
    loops = assemble_loops(0, curves, tau_e=0.05)
    assert len(loops) == 2
    assert loops[0].role == "outer" and set(loops[0].curve_ids) == {0, 1, 2, 3}
    assert loops[1].role == "hole" and set(loops[1].curve_ids) == {4, 5, 6, 7}


def test_unclosable_chain_marked_open():
    curves = _square_curves()
    del curves[2]
    loops = assemble_loops(0, curves, tau_e=0.05)
    assert any(not lp.closed for lp in loops)


def test_orient_flips_clockwise_outer():
    g = _grid(lambda u, v: (u, v, 0 * u))
    f = fit_surface(g)
    curves = _square_curves()
    # make the walk clockwise by reversing every curve and the chain order
    cw = {k: curves[3 - k][::-1].copy() for k in range(4)}
    loops = assemble_loops(0, cw, tau_e=0.1)
    assert loops[0].closed
    status = orient_loops(f, loops, cw, tau_p=0.1)
    assert status == "ok"
    assert loops[0].signed_area > 0


def test_orient_projection_failure():
    g = _grid(lambda u, v: (u, v, 0 * u + 5.0))  # surface far from the curves
    f = fit_surface(g)
    curves = _square_curves()
    loops = assemble_loops(0, curves, tau_e=0.1)
    assert orient_loops(f, loops, curves, tau_p=0.1) == "projection"


def test_orient_ccw_outer_unchanged():
    g = _grid(lambda u, v: (u, v, 0 * u))
    f = fit_surface(g)
    curves = _square_curves()
    before = {k: v.copy() for k, v in curves.items()}
    loops = assemble_loops(0, curves, tau_e=0.1)
    assert orient_loops(f, loops, curves, tau_p=0.1) == "ok"
    for k in curves:
        assert np.array_equal(curves[k], before[k])
    assert loops[0].signed_area > 0


def test_orient_degenerate_loop_flagged():
    g = _grid(lambda u, v: (u, v, 0 * u))
    f = fit_surface(g)
    # out-and-back chain along a line: closes within tolerance, zero area
    a, b = np.array([0.2, 0.5, 0.0]), np.array([0.8, 0.5, 0.0])
    curves = {0: np.linspace(a, b, 16), 1: np.linspace(b, a, 16)}
    loops = assemble_loops(0, curves, tau_e=0.1)
    assert loops[0].closed
    assert orient_loops(f, loops, curves, tau_p=0.1) == "degenerate-loop"


# -- solid round trips --------------------------------------------------------


@pytest.mark.parametrize(
    "maker,chi",
    [
        (lambda: synthgen.make_box(2, 1.5, 1), 2),
        (
            lambda: synthgen.make_prism(
                np.array(
                    [[np.cos(a), np.sin(a)] for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)]
                ),
                1.2,
            ),
            2,
        ),
        (lambda: synthgen.make_box_with_hole((2, 2, 1), (0.9, 1.1), (0.4, 0.3)), 0),
        (lambda: synthgen.make_box_union((2, 2, 1), (1, 0.8, 0.6), (0.4, 0.5)), 2),
    ],
)
def test_round_trip_valid(maker, chi):
    report, assembly = solidify_model(maker())
    assert report.valid
    assert report.euler == chi


def test_translated_face_invalidates_cube():
    m = synthgen.make_box(2, 2, 2)
    grids = np.stack([s.points for s in m.surfaces])
    grids[2] = grids[2] + 0.5
    cp = {j: m.half_curves[j].points for j in range(m.num_half_curves)}
    ow = {j: m.half_curves[j].owner_surface for j in range(m.num_half_curves)}
    tw = {j: int(m.twin[j]) for j in range(m.num_half_curves)}
    report, _ = solidify(grids, cp, ow, tw)
    assert not report.valid
    assert len(report.unmatched_halfcurves) >= 4


def test_tolerance_monotonicity():
    m = synthgen.make_box_union((2, 1.8, 1), (0.9, 0.8, 0.5), (0.5, 0.4))
    taus = [0.02, 0.05, 0.1, 0.2, 0.3]
    valid = [solidify_model(m, tau_e=t, tau_p=t)[0].valid for t in taus]
    # once valid, stays valid as the tolerance grows
    seen = False
    for v in valid:
        if seen:
            assert v
        seen = seen or v
    assert valid[-1]


def test_twin_search_without_proposal():
    m = synthgen.make_box(2, 2, 2)
    grids = np.stack([s.points for s in m.surfaces])
    cp = {j: m.half_curves[j].points for j in range(m.num_half_curves)}
    ow = {j: m.half_curves[j].owner_surface for j in range(m.num_half_curves)}
    report, _ = solidify(grids, cp, ow, None)
    assert report.valid and report.euler == 2


def test_orientation_invariant_after_pipeline():
    report, assembly = solidify_model(synthgen.make_box_with_hole((2, 2, 1), (1.0, 1.0), (0.4, 0.35)))
    assert report.valid
    for loops in assembly.loops:
        for lp in loops:
            if lp.role == "outer":
                assert lp.signed_area > 0
            else:
                assert lp.signed_area < 0


# -- mesh ----------------------------------------------------------------------


def test_cube_mesh_closed_area_euler():
    m = synthgen.make_box(2, 2, 2)
    report, assembly = solidify_model(m)
    mesh = extract_mesh(report, assembly)
    assert mesh.is_closed()
    assert mesh.euler_characteristic() == 2
    assert abs(mesh.area() - 24.0) / 24.0 < 0.01  # normalized cube side 2


def test_mesh_requires_valid_report():
    m = synthgen.make_box(2, 2, 2)
    grids = np.stack([s.points for s in m.surfaces])
    grids[0] += 0.7
    cp = {j: m.half_curves[j].points for j in range(m.num_half_curves)}
    ow = {j: m.half_curves[j].owner_surface for j in range(m.num_half_curves)}
    tw = {j: int(m.twin[j]) for j in range(m.num_half_curves)}
    report, assembly = solidify(grids, cp, ow, tw)
    with pytest.raises(ValueError):
        extract_mesh(report, assembly)


def test_assembly_to_model_valid_topology():
    from breplat.brep import validate_topology

    m = synthgen.make_box(1.5, 1.0, 2.0)
    report, assembly = solidify_model(m)
    grids = np.stack([s.points for s in m.surfaces])
    rebuilt = assembly_to_model(grids, assembly)
    rep = validate_topology(rebuilt, tau_v=1e-9)
    assert rep.ok
    assert rep.shell_euler == [2]


# -- selection -------------------------------------------------------------------


def test_select_best_prefers_exact_match():
    base = synthgen.make_box(2, 1.5, 1)
    others = [synthgen.make_box(1, 1, 1), synthgen.make_box(2, 2, 2)]
    cond = base.surface_points()[::7]
    best, idx = select_best([others[0], base, others[1]], cond, valid=[True, True, True])
    assert idx == 1


def test_select_best_single_candidate():
    m = synthgen.make_box(1, 1, 1)
    best, idx = select_best([m], m.surface_points()[::5], valid=[False])
    assert idx == 0


def test_select_best_all_invalid_warns():
    m1, m2 = synthgen.make_box(1, 1, 1), synthgen.make_box(2, 1, 1)
    cond = m2.surface_points()[::9]
    with pytest.warns(UserWarning):
        best, idx = select_best([m1, m2], cond, valid=[False, False])
    assert idx == 1


def test_select_best_empty_errors():
    with pytest.raises(ValueError):
        select_best([], np.zeros((4, 3)))
