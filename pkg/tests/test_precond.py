import numpy as np
import pytest
import scipy.sparse as sp

from repulsor import shapes
from repulsor.bvh import build_bvh
from repulsor.constraints import Barycenter, ConstraintSet, Pin, positional_rows
from repulsor.hmatrix import FractionalStack, KernelSpec, assemble_dense_fractional, build_bct
from repulsor.mesh import build_laplacian
from repulsor.precond import (
    SingularSystemError,
    SolveError,
    apply_preconditioner,
    baseline_metric,
    build_preconditioner,
    fractional_system,
    self_interaction,
    solve,
    solve_A3,
    sparse_system,
)
from repulsor.tpe import differential_exact


def _rows(mesh, *constraints):
    cs = ConstraintSet(list(constraints)).initialize(mesh)
    return positional_rows(cs, mesh)[0]


def _stack(mesh, chi=0.5):
    return FractionalStack(mesh, build_bct(build_bvh(mesh), chi), 6.0)


def test_factorization_needs_positional_rows():
    m = shapes.icosphere(2)
    st = _stack(m)
    build_preconditioner(m, st, _rows(m, Barycenter(0)))
    build_preconditioner(m, st, _rows(m, Pin(5)))
    with pytest.raises(SingularSystemError, match="barycenter"):
        build_preconditioner(m, st, None)
    two = shapes.merge(shapes.icosphere(1), shapes.icosphere(1, center=(3, 0, 0)))
    with pytest.raises(SingularSystemError):
        build_preconditioner(two, _stack(two), _rows(two, Barycenter(0)))


def test_apply_zero_linear_symmetric():
    m = shapes.bumpy_sphere(2)
    C = _rows(m, Barycenter(0))
    P = build_preconditioner(m, _stack(m), C)
    size = m.n_vertices + C.shape[0]
    assert not np.any(apply_preconditioner(P, np.zeros(size)))
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, size))
    u[m.n_vertices:] = v[m.n_vertices:] = 0.0
    Pu, Pv = apply_preconditioner(P, u), apply_preconditioner(P, v)
    lin = apply_preconditioner(P, 2.0 * u - 3.0 * v)
    assert np.linalg.norm(lin - (2 * Pu - 3 * Pv)) <= 1e-12 * np.linalg.norm(lin)
    n = m.n_vertices
    assert abs(u[:n] @ Pv[:n] - v[:n] @ Pu[:n]) <= 1e-8 * np.linalg.norm(Pu) * np.linalg.norm(v)


def test_apply_matches_dense_oracle():
    m = shapes.bumpy_sphere(1)
    C = _rows(m, Barycenter(0))
    st = _stack(m, 0.0)
    P = build_preconditioner(m, st, C)
    n, r = m.n_vertices, C.shape[0]
    L, _ = build_laplacian(m)
    K = np.block([[L.toarray(), C.T.toarray()], [C.toarray(), np.zeros((r, r))]])
    G = assemble_dense_fractional(m, KernelSpec.lsigma(st.sigma)) + self_interaction(m, st.sigma).toarray()
    rhs = np.random.default_rng(1).normal(size=n + r)
    y = np.linalg.solve(K, np.concatenate([rhs[:n], np.zeros(r)]))
    z = np.linalg.solve(K, np.concatenate([G @ y[:n], rhs[n:]]))
    out = apply_preconditioner(P, rhs)
    assert np.linalg.norm(out[:n] - z[:n]) <= 1e-10 * np.linalg.norm(z[:n])
    assert np.allclose(C @ out[:n], rhs[n:], atol=1e-12)


def test_solve_recovers_known_solution():
    m = shapes.bumpy_sphere(2)
    C = _rows(m, Barycenter(0))
    st = _stack(m)
    P = build_preconditioner(m, st, C)
    rng = np.random.default_rng(2)
    w = rng.normal(size=(m.n_vertices, 3))
    w -= C.toarray()[0] @ w  # weights sum to one, so the barycenter row of w vanishes
    b = st.apply("A3", w.ravel()).reshape(-1, 3)
    x, rep = solve_A3(st, P, b, tol=1e-10)
    assert rep.converged and rep.residual <= 1e-10
    assert np.linalg.norm(x - w) <= 1e-6 * np.linalg.norm(w)


def test_solve_matches_dense_saddle():
    m = shapes.bumpy_sphere(1)
    C = _rows(m, Barycenter(0))
    st = _stack(m, 0.0)
    system = fractional_system(st, C)
    n, r = m.n_vertices, C.shape[0]
    A = np.column_stack([st.apply("A", e) for e in np.eye(n)])
    K = np.block([[A, C.T.toarray()], [C.toarray(), np.zeros((r, r))]])
    b = differential_exact(m)
    dense = np.linalg.solve(K, np.vstack([b, np.zeros((r, 3))]))[:n]
    x, mu, rep = solve(system, b, tol=1e-12)
    assert np.linalg.norm(x - dense) <= 1e-8 * np.linalg.norm(dense)


def test_preconditioning_reduces_iterations():
    for level in (1, 2):
        m = shapes.bumpy_sphere(level)
        C = _rows(m, Barycenter(0))
        st = _stack(m)
        b = differential_exact(m)
        _, _, pre = solve(fractional_system(st, C), b, tol=1e-6)
        _, _, raw = solve(fractional_system(st, C, precondition=False), b, tol=1e-6, max_iter=5000)
        assert pre.iterations < raw.iterations


def test_iteration_cap_raises_with_best_iterate():
    m = shapes.bumpy_sphere(2)
    C = _rows(m, Barycenter(0))
    with pytest.raises(SolveError) as info:
        solve(fractional_system(_stack(m), C, precondition=False), differential_exact(m), tol=1e-12, max_iter=3)
    assert info.value.x.shape == (m.n_vertices, 3)
    assert not info.value.report.converged


def test_zero_rhs():
    m = shapes.icosphere(1)
    x, _, rep = solve(fractional_system(_stack(m), _rows(m, Barycenter(0))), np.zeros((m.n_vertices, 3)))
    assert not np.any(x) and rep.iterations == 0


def test_baseline_metrics():
    m = shapes.bumpy_sphere(1)
    L, M = build_laplacian(m)
    assert abs(baseline_metric(m, "L2") - M).max() == 0
    assert abs(baseline_metric(m, "H1") - L).max() == 0
    H2 = baseline_metric(m, "H2")
    assert abs(H2 - L @ sp.diags(1 / M.diagonal()) @ L).max() <= 1e-12 * abs(H2).max()
    with pytest.raises(ValueError):
        baseline_metric(m, "H3")
    C = _rows(m, Barycenter(0))
    for tag in ("L2", "H1", "H2"):
        x, _, rep = solve(sparse_system(m, baseline_metric(m, tag), C, tag), differential_exact(m), tol=1e-10)
        assert rep.iterations <= 3
