import numpy as np
import pytest

from repulsor import shapes
from repulsor.bvh import build_bvh
from repulsor.constraints import (
    Barycenter,
    ConstraintSet,
    Pin,
    TotalArea,
    TotalVolume,
    _barycenter_weights,
    barycenter_rate,
    constraint_jacobian,
    constraint_value,
    corrective_step,
    positional_rows,
    project_direction,
    project_positions,
    schur_build,
)
from repulsor.hmatrix import FractionalStack, build_bct
from repulsor.mesh import area_gradient, totals
from repulsor.precond import fractional_system, solve
from repulsor.tpe import differential_exact

from conftest import central_fd, random_convex_mesh, rel_l2


def _setup(mesh, constraints, chi=0.0):
    cs = ConstraintSet(list(constraints)).initialize(mesh)
    st = FractionalStack(mesh, build_bct(build_bvh(mesh), chi), 6.0)
    return cs, fractional_system(st, positional_rows(cs, mesh)[0]), st


def _dense_saddle(st, cs, mesh):
    """Full dense ``[[A3, J^T], [J, 0]]`` over every constraint row."""
    n = mesh.n_vertices
    A = np.column_stack([st.apply("A", e) for e in np.eye(n)])
    A3 = np.kron(A, np.eye(3))
    J = constraint_jacobian(cs, mesh).toarray()
    k = J.shape[0]
    return np.block([[A3, J.T], [J, np.zeros((k, k))]]), J


def test_cube_residuals():
    c = shapes.cube()
    cs = ConstraintSet([TotalArea(6.0), TotalVolume(1.0)])
    assert np.allclose(constraint_value(cs, c), 0.0, atol=1e-14)


def test_translated_barycenter_and_pin():
    c = shapes.cube()
    cs = ConstraintSet([Barycenter(0), Pin(3)]).initialize(c)
    t = np.array([0.3, -0.2, 1.5])
    assert np.allclose(constraint_value(cs, c), 0.0)
    moved = c.with_positions(c.positions + t)
    assert np.allclose(constraint_value(cs, moved), np.concatenate([t, t]), atol=1e-14)


def test_missing_target_raises():
    with pytest.raises(ValueError, match="initialize"):
        constraint_value(ConstraintSet([TotalArea()]), shapes.cube())


def test_area_row_matches_finite_differences():
    m = random_convex_mesh(100, seed=4)
    fd = central_fd(lambda x: totals(m.with_positions(x))[0], m.positions.copy(), 1e-6)
    row = constraint_jacobian(ConstraintSet([TotalArea(1.0)]), m).toarray().reshape(-1, 3)
    assert rel_l2(row, fd) <= 1e-5
    assert np.allclose(row, area_gradient(m))


def test_volume_rows_follow_outward_normals():
    m = shapes.icosphere(3)
    row = constraint_jacobian(ConstraintSet([TotalVolume(1.0)]), m).toarray().reshape(-1, 3)
    normal = m.positions / np.linalg.norm(m.positions, axis=1, keepdims=True)
    cos = np.einsum("ij,ij->i", row, normal) / np.linalg.norm(row, axis=1)
    assert cos.min() >= 1 - 1e-3


def test_barycenter_rows_reproduce_translation():
    m = shapes.bumpy_sphere(2)
    J = constraint_jacobian(ConstraintSet([Barycenter(0)]), m)
    t = np.array([0.1, 2.0, -0.7])
    assert np.allclose(J @ np.tile(t, m.n_vertices), t, atol=1e-13)


def test_barycenter_rate_matches_finite_differences():
    rng = np.random.default_rng(2)
    m = shapes.merge(shapes.ellipsoid(1), shapes.icosphere(1, 0.5, center=(3, 0, 0)))
    m = m.with_positions(m.positions + 0.02 * rng.normal(size=m.positions.shape))
    x = rng.normal(size=m.positions.shape)
    for comp in range(2):
        def bary(t):
            moved = m.with_positions(m.positions + t * x)
            return _barycenter_weights(moved, comp) @ moved.positions
        fd = (bary(1e-6) - bary(-1e-6)) / 2e-6
        assert np.abs(barycenter_rate(m, comp, x) - fd).max() <= 1e-7


def test_empty_schur_cache_costs_no_solves():
    m = shapes.bumpy_sphere(1)
    cs, system, _ = _setup(m, [Barycenter(0)])
    cache = schur_build(system, cs, m, tol=1e-12)
    assert cache.k == 0 and cache.n_solves == 0
    g = differential_exact(m)
    x, _ = project_direction(cache, g)
    ref, _, _ = solve(system, -g, tol=1e-12)
    assert np.array_equal(x, ref)


def test_schur_cache_counts_and_complement():
    m = shapes.bumpy_sphere(1)
    cs, system, st = _setup(m, [Barycenter(0), TotalArea(), TotalVolume()])
    cache = schur_build(system, cs, m, tol=1e-12)
    assert cache.k == 2 and cache.n_solves == 2
    K, J = _dense_saddle(st, ConstraintSet(cs.positional), m)
    Js = constraint_jacobian(cs, m, cs.schur).toarray()
    rhs = np.vstack([Js.T, np.zeros((K.shape[0] - Js.shape[1], 2))])
    Z = np.linalg.solve(K, rhs)[: Js.shape[1]]
    S = -Js @ Z
    assert np.abs(cache.complement - S).max() <= 1e-8 * np.abs(S).max()
    assert np.abs(cache.complement - cache.complement.T).max() <= 1e-8 * np.abs(S).max()


def test_projected_direction_matches_dense_saddle():
    m = shapes.bumpy_sphere(1)
    cs, system, st = _setup(m, [Barycenter(0), TotalArea()])
    cache = schur_build(system, cs, m, tol=1e-12)
    g = differential_exact(m)
    x, _ = project_direction(cache, g)
    K, J = _dense_saddle(st, cs, m)
    dense = np.linalg.solve(K, np.concatenate([-g.ravel(), np.zeros(J.shape[0])]))[: 3 * m.n_vertices]
    assert rel_l2(x, dense) <= 1e-7
    assert np.abs(J @ x.ravel()).max() <= 1e-8 * np.linalg.norm(J) * np.linalg.norm(x)


def test_corrective_step():
    c = shapes.cube()
    cs, system, _ = _setup(c, [Barycenter(0), TotalVolume(1.0)])
    cache = schur_build(system, cs, c, tol=1e-12)
    assert not np.any(corrective_step(cache, np.zeros(1)))
    ctr = c.positions.mean(axis=0)
    inflated = c.with_positions(ctr + (c.positions - ctr) * 1.01 ** (1 / 3))
    res = constraint_value(cs, inflated, cs.schur)
    assert res[0] == pytest.approx(0.01, rel=1e-12)
    h = corrective_step(cache, res)
    J = constraint_jacobian(cs, c, cs.schur)
    assert np.allclose(J @ h.ravel(), -res, rtol=1e-6)
    after = constraint_value(cs, inflated.with_positions(inflated.positions + h), cs.schur)
    assert abs(after[0]) <= abs(res[0]) / 10


def test_project_positions_reaches_tolerance():
    m = shapes.bumpy_sphere(2)
    cs = ConstraintSet([Barycenter(0), TotalArea(), TotalVolume()]).initialize(m)
    rng = np.random.default_rng(5)
    noisy = m.with_positions(m.positions * 1.02 + 0.01 * rng.normal(size=m.positions.shape))
    out, res = project_positions(cs, noisy)
    assert np.abs(res).max() <= 1e-10
    cs2, system, _ = _setup(m, [Barycenter(0), TotalArea(), TotalVolume()])
    out2, res2 = project_positions(cs, noisy, schur_build(system, cs2, m, tol=1e-10))
    assert np.abs(res2).max() <= 1e-10


def test_positional_and_schur_pins_agree():
    m = shapes.bumpy_sphere(1)
    g = differential_exact(m)
    dirs = []
    for positional in (True, False):
        cs, system, _ = _setup(m, [Barycenter(0), Pin(7, positional=positional)])
        x, _ = project_direction(schur_build(system, cs, m, tol=1e-12), g)
        dirs.append(x)
    assert np.allclose(dirs[0][7], 0.0, atol=1e-10) and np.allclose(dirs[1][7], 0.0, atol=1e-10)
    assert rel_l2(dirs[1], dirs[0]) <= 1e-6


def test_remap_follows_pins():
    cs = ConstraintSet([Pin(4)])
    cs.remap(np.array([0, 1, 2, 3, 9]))
    assert cs.constraints[0].vertex == 9
    with pytest.raises(ValueError, match="removed"):
        cs.remap(-np.ones(10, dtype=int))
