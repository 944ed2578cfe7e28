import json
from pathlib import Path

import numpy as np
import pytest

from conftest import random_convex_mesh
from repulsor import shapes
from repulsor.bvh import BvhParams, build_bvh
from repulsor.hmatrix import (
    FractionalStack,
    HMatrix,
    KernelSpec,
    apply_fractional,
    assemble_dense_fractional,
    averaging_operator,
    build_bct,
    dense_kernel_matrix,
    derivative_operators,
    hmat_apply,
    kernel_value,
)

GOLDEN = json.loads((Path(__file__).parent / "golden.json").read_text())
P6 = 6.0
SPECS = [KernelSpec.lsigma(1 / 3), KernelSpec.high(P6), KernelSpec.low(P6)]


def _box_gap(t, I, J):
    gap = np.maximum(np.maximum(t.box_min[I] - t.box_max[J], t.box_min[J] - t.box_max[I]), 0)
    return np.linalg.norm(gap)


@pytest.mark.parametrize("chi", [0.0, 0.25, 0.5, 1.0])
def test_bct_partition_and_admissibility(chi):
    m = shapes.torus(1, 1 / 3, 36, 12)
    t = build_bvh(m)
    bct = build_bct(t, chi)
    assert bct.block_sizes() == m.n_faces**2
    if chi == 0:
        assert len(bct.admissible) == 0
    pairs = {tuple(p) for p in bct.admissible.tolist()}
    assert pairs == {(j, i) for i, j in pairs}
    for I, J in bct.admissible:
        assert max(t.radius[I], t.radius[J]) <= chi * _box_gap(t, I, J) + 1e-15


def test_kernel_values():
    assert kernel_value(KernelSpec.lsigma(0.5), [0, 0, 0], np.eye(3), [2, 0, 0], np.eye(3)) == pytest.approx(0.125)
    e3 = np.outer([0, 0, 1], [0, 0, 1])
    assert kernel_value(KernelSpec.low(P6), [0, 0, 0], e3, [1, 2, 0], e3) == 0.0
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=3), rng.normal(size=3)
    n1, n2 = rng.normal(size=3), rng.normal(size=3)
    P, Q = np.outer(n1, n1) / (n1 @ n1), np.outer(n2, n2) / (n2 @ n2)
    spec = KernelSpec.low(P6)
    assert kernel_value(spec, X, P, Y, Q) == pytest.approx(kernel_value(spec, Y, Q, X, P), rel=1e-15)
    with pytest.raises(ValueError):
        kernel_value(spec, X, P, X, Q)
    with pytest.raises(ValueError):
        KernelSpec("Other", 1.0)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.tag)
def test_chi_zero_matches_dense(spec):
    m = shapes.bumpy_sphere(2)
    bct = build_bct(build_bvh(m), 0.0)
    x = np.random.default_rng(1).normal(size=(m.n_faces, 2))
    D = dense_kernel_matrix(m, spec)
    y = hmat_apply(bct, spec, x)
    assert np.linalg.norm(y - D @ x) <= 1e-12 * np.linalg.norm(D @ x)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.tag)
@pytest.mark.parametrize("chi", [0.25, 0.5, 1.0])
def test_hierarchical_product_symmetric(spec, chi):
    m = shapes.torus(1, 1 / 3, 36, 12)
    H = HMatrix.build(build_bct(build_bvh(m), chi), spec)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=m.n_faces), rng.normal(size=m.n_faces)
    a, b = x @ H.matvec(y), y @ H.matvec(x)
    assert abs(a - b) <= 1e-10 * abs(a)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.tag)
def test_chi_half_error_golden(spec):
    m = shapes.torus()  # 1536 faces
    t = build_bvh(m)
    H = HMatrix.build(build_bct(t, 0.5), spec)
    D = dense_kernel_matrix(m, spec)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=m.n_faces)
        worst = max(worst, np.linalg.norm(H.matvec(x) - D @ x) / np.linalg.norm(D @ x))
    frozen = GOLDEN["hmatrix_chi05_max_rel_error_torus_48x16"][spec.tag]
    assert worst <= 0.15
    assert worst <= 1.1 * frozen


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.tag)
def test_error_decreases_with_chi(spec):
    m = shapes.torus(1, 1 / 3, 36, 12)
    t = build_bvh(m)
    D = dense_kernel_matrix(m, spec)
    x = np.random.default_rng(3).normal(size=m.n_faces)
    err = [np.linalg.norm(hmat_apply(build_bct(t, chi), spec, x) - D @ x) for chi in (1.0, 0.5, 0.25, 0.125, 0.0)]
    assert all(b <= a for a, b in zip(err, err[1:]))
    assert err[-1] <= 1e-12 * np.linalg.norm(D @ x)


def test_dimension_mismatch():
    m = shapes.icosphere(1)
    H = HMatrix.build(build_bct(build_bvh(m), 0.5), SPECS[0])
    with pytest.raises(ValueError):
        H.matvec(np.ones(m.n_faces + 1))


def test_sparse_operators():
    m = shapes.bumpy_sphere(1)
    assert np.allclose(averaging_operator(m) @ np.ones(m.n_vertices), m.face_areas, rtol=1e-14)
    for D in derivative_operators(m):
        assert np.abs(D @ np.ones(m.n_vertices)).max() <= 1e-12


def _stack(m, chi=0.0):
    return FractionalStack(m, build_bct(build_bvh(m), chi), P6)


@pytest.mark.parametrize("which", ["Lsigma", "B", "B0"])
def test_constants_in_kernel(which):
    m = shapes.bumpy_sphere(2)
    st = _stack(m, 0.5)
    v = np.ones(m.n_vertices)
    w = np.random.default_rng(0).normal(size=m.n_vertices)
    scale = np.linalg.norm(apply_fractional(st, which, w)) / np.linalg.norm(w)
    assert np.linalg.norm(apply_fractional(st, which, v)) <= 1e-10 * scale * np.linalg.norm(v)


def test_lsigma_positive_semidefinite():
    m = shapes.bumpy_sphere(2)
    st = _stack(m, 0.5)
    V = np.random.default_rng(4).normal(size=(m.n_vertices, 100))
    LV = apply_fractional(st, "Lsigma", V)
    assert np.einsum("ij,ij->j", V, LV).min() >= -1e-10


def test_a3_acts_per_coordinate_and_commutes_with_permutation():
    m = shapes.bumpy_sphere(1)
    st = _stack(m, 0.5)
    X = np.random.default_rng(5).normal(size=(m.n_vertices, 3))
    out = apply_fractional(st, "A3", X.ravel()).reshape(-1, 3)
    perm = [2, 0, 1]
    outp = apply_fractional(st, "A3", X[:, perm].ravel()).reshape(-1, 3)
    assert np.allclose(outp, out[:, perm], rtol=1e-13, atol=1e-13 * np.abs(out).max())
    assert np.allclose(out[:, 0], apply_fractional(st, "A", X[:, 0]))
    with pytest.raises(ValueError):
        apply_fractional(st, "A3", np.ones(5))


@pytest.mark.parametrize("tag, which", [("Lsigma", "Lsigma"), ("HighOrder", "B"), ("LowOrder", "B0")])
def test_matches_dense_assembly_at_chi_zero(tag, which):
    m = shapes.bumpy_sphere(2)  # 320 faces
    st = _stack(m, 0.0)
    dense = assemble_dense_fractional(m, st.spec(tag))
    V = np.random.default_rng(6).normal(size=(m.n_vertices, 4))
    assert np.linalg.norm(apply_fractional(st, which, V) - dense @ V) <= 1e-12 * np.linalg.norm(dense @ V)


def _hat_gradients_lstsq(m):
    """Gradient of each corner's hat function on each face, via the pseudo-inverse of the edge matrix."""
    G = np.zeros((m.n_faces, m.n_vertices, 3))
    for f, (i, j, k) in enumerate(m.faces):
        x = m.positions[[i, j, k]]
        E = np.stack([x[1] - x[0], x[2] - x[0]], axis=1)
        pinv = E @ np.linalg.inv(E.T @ E)
        for c, v in enumerate((i, j, k)):
            vals = np.zeros(3)
            vals[c] = 1.0
            G[f, v] = pinv @ (vals[1:] - vals[0])
    return G


@pytest.mark.parametrize("tag", ["Lsigma", "HighOrder", "LowOrder"])
def test_dense_assembly_equals_quartic_loop(tag):
    m = random_convex_mesh(27, seed=3)
    assert m.n_faces == 50
    spec = KernelSpec(tag, 1 / 3 if tag == "Lsigma" else 2 - 2 / P6)
    X, N, a = m.barycenters, m.face_normals, m.face_areas
    d = X[:, None] - X[None]
    r2 = np.einsum("stk,stk->st", d, d)
    np.fill_diagonal(r2, 1.0)
    w = np.outer(a, a) * r2 ** (-0.5 * spec.exponent)
    if tag == "LowOrder":
        w *= np.einsum("sk,stk->st", N, d) ** 2 / r2**2
    np.fill_diagonal(w, 0.0)
    if tag == "HighOrder":
        G = _hat_gradients_lstsq(m)
        diff = G[:, None] - G[None]  # (S, T, i, 3)
        brute = np.einsum("st,stik,stjk->ij", w, diff, diff)
    else:
        phi = np.zeros((m.n_faces, m.n_vertices))
        np.put_along_axis(phi, m.faces, 1 / 3, axis=1)
        diff = phi[:, None] - phi[None]
        brute = np.einsum("st,sti,stj->ij", w, diff, diff)
    dense = assemble_dense_fractional(m, spec)
    assert np.abs(dense - brute).max() <= 1e-12 * np.abs(brute).max()
    assert np.abs(dense - dense.T).max() <= 1e-12 * np.abs(dense).max()
    assert np.abs(dense.sum(axis=1)).max() <= 1e-12 * np.abs(dense).max()


def test_high_order_annihilates_affine_functions_on_planar_mesh():
    m = shapes.disk(3)
    B = assemble_dense_fractional(m, KernelSpec.high(P6))
    u = m.positions @ np.array([0.3, -1.2, 0.0]) + 0.7
    assert np.abs(B @ u).max() <= 1e-10 * np.abs(B).max() * np.abs(u).max()


def test_dense_assembly_cap():
    with pytest.raises(ValueError):
        assemble_dense_fractional(shapes.icosphere(2), KernelSpec.high(P6), max_faces=100)


@pytest.mark.parametrize("tag", ["Lsigma", "HighOrder", "LowOrder"])
def test_factorization_identity_dense(tag):
    m = random_convex_mesh(120, seed=4)
    st = _stack(m, 0.0)
    spec = st.spec(tag)
    H = dense_kernel_matrix(m, spec)
    a = m.face_areas
    core = np.diag(H @ a / a) - H
    factors = st.V if tag == "HighOrder" else [st.U]
    op = sum(2 * F.T @ core @ F for F in factors)
    dense = assemble_dense_fractional(m, spec)
    rng = np.random.default_rng(9)
    for _ in range(20):
        u, v = rng.normal(size=(2, m.n_vertices))
        lhs, rhs = u @ dense @ v, u @ op @ v
        assert abs(lhs - rhs) <= 1e-12 * np.abs(u) @ np.abs(dense) @ np.abs(v)


def test_low_order_factor_choice():
    m = shapes.icosphere(1)
    with pytest.raises(ValueError):
        FractionalStack(m, build_bct(build_bvh(m, BvhParams(4)), 0.5), P6, low_order_factor="W")
