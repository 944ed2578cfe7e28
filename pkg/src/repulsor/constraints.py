"""Hard constraints, Schur-complement projection and corrective projection.

Jacobians act on the row-major flattening of an ``(n, 3)`` position array:
column ``3 i + c`` is coordinate ``c`` of vertex ``i``. Linear positional
constraints (barycenters, pins) are by default folded into the saddle system
as scalar rows applied to every coordinate; area and volume go through the
Schur complement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh, area_gradient, build_laplacian, totals, volume_gradient
from .precond import SaddleSystem, SolveReport, saddle_matrix, solve

log = logging.getLogger(__name__)


@dataclass
class Barycenter:
    component: int = 0
    target: np.ndarray | None = None
    positional: bool = True
    size = 3


@dataclass
class Pin:
    vertex: int
    target: np.ndarray | None = None
    positional: bool = True
    size = 3


@dataclass
class TotalArea:
    target: float | None = None
    positional = False
    size = 1


@dataclass
class TotalVolume:
    target: float | None = None
    positional = False
    size = 1


def _barycenter_weights(mesh: TriMesh, component: int) -> np.ndarray:
    """Dual-area weights normalized over the component (frozen at the current mesh)."""
    w = np.where(mesh.component_of == component, mesh.vertex_areas, 0.0)
    total = w.sum()
    if total == 0.0:
        raise ValueError(f"component {component} does not exist")
    return w / total


def barycenter_rate(mesh: TriMesh, component: int, x: np.ndarray) -> np.ndarray:
    """Exact derivative of the dual-area barycenter of ``component`` along ``x``.

    Unlike the frozen-weight rows this includes the change of the weights:
    ``dX = (sum a_i x_i + sum da_i (f_i - X)) / A``.
    """
    c, nrm = mesh.corners, mesh.face_normals
    x = np.asarray(x, dtype=float)
    dface = np.zeros(mesh.n_faces)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        dface += np.einsum("ij,ij->i", 0.5 * np.cross(c[:, j] - c[:, l], nrm), x[mesh.faces[:, k]])
    da = np.zeros(mesh.n_vertices)
    np.add.at(da, mesh.faces.ravel(), np.repeat(dface / 3.0, 3))
    mask = mesh.component_of == component
    a = np.where(mask, mesh.vertex_areas, 0.0)
    total = a.sum()
    X = a @ mesh.positions / total
    return (a @ x + np.where(mask, da, 0.0) @ (mesh.positions - X)) / total


@dataclass
class ConstraintSet:
    constraints: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.constraints)

    def __len__(self):
        return len(self.constraints)

    @property
    def k(self) -> int:
        return sum(c.size for c in self.constraints)

    @property
    def schur(self) -> list:
        return [c for c in self.constraints if not c.positional]

    @property
    def positional(self) -> list:
        return [c for c in self.constraints if c.positional]

    def initialize(self, mesh: TriMesh) -> "ConstraintSet":
        """Fill unset targets with the current values; returns ``self``."""
        area, volume = totals(mesh)
        for c in self.constraints:
            if c.target is not None:
                continue
            if isinstance(c, Barycenter):
                c.target = _barycenter_weights(mesh, c.component) @ mesh.positions
            elif isinstance(c, Pin):
                c.target = mesh.positions[c.vertex].copy()
            elif isinstance(c, TotalArea):
                c.target = area
            elif isinstance(c, TotalVolume):
                c.target = volume
        return self

    def remap(self, vertex_map: np.ndarray) -> None:
        """Follow pinned vertices through a remeshing pass (``old -> new``)."""
        for c in self.constraints:
            if isinstance(c, Pin):
                c.vertex = int(vertex_map[c.vertex])
                if c.vertex < 0:
                    raise ValueError("a pinned vertex was removed by remeshing")


def _value(c, mesh: TriMesh, area: float, volume: float) -> np.ndarray:
    if c.target is None:
        raise ValueError(f"{type(c).__name__} has no target; call initialize()")
    if isinstance(c, Barycenter):
        return _barycenter_weights(mesh, c.component) @ mesh.positions - c.target
    if isinstance(c, Pin):
        return mesh.positions[c.vertex] - c.target
    if isinstance(c, TotalArea):
        return np.array([area - c.target])
    if isinstance(c, TotalVolume):
        return np.array([volume - c.target])
    raise TypeError(f"unknown constraint {c!r}")


def constraint_value(cset, mesh: TriMesh, which=None) -> np.ndarray:
    """Stacked residuals ``Phi(f)`` in constraint order (optionally for a subset)."""
    area, volume = totals(mesh)
    items = cset.constraints if which is None else which
    if not items:
        return np.zeros(0)
    return np.concatenate([_value(c, mesh, area, volume) for c in items])


def normalized_residual(cset, mesh: TriMesh) -> np.ndarray:
    """Residuals in natural units: meters for barycenters and pins, relative for area and volume."""
    area, volume = totals(mesh)
    out = []
    for c in cset:
        v = _value(c, mesh, area, volume)
        if isinstance(c, (TotalArea, TotalVolume)):
            v = v / abs(c.target)
        out.append(v)
    return np.concatenate(out) if out else np.zeros(0)


def _jacobian_rows(c, mesh: TriMesh) -> sp.csr_matrix:
    n = mesh.n_vertices
    if isinstance(c, Barycenter):
        w = _barycenter_weights(mesh, c.component)
        idx = np.flatnonzero(w)
        rows = np.repeat(np.arange(3)[None, :], len(idx), 0).ravel()
        cols = (3 * idx[:, None] + np.arange(3)).ravel()
        return sp.csr_matrix((np.repeat(w[idx], 3), (rows, cols)), shape=(3, 3 * n))
    if isinstance(c, Pin):
        return sp.csr_matrix((np.ones(3), (np.arange(3), 3 * c.vertex + np.arange(3))), shape=(3, 3 * n))
    if isinstance(c, TotalArea):
        return sp.csr_matrix(area_gradient(mesh).reshape(1, -1))
    if isinstance(c, TotalVolume):
        return sp.csr_matrix(volume_gradient(mesh).reshape(1, -1))
    raise TypeError(f"unknown constraint {c!r}")


def constraint_jacobian(cset, mesh: TriMesh, which=None) -> sp.csr_matrix:
    """``k x 3|V|`` Jacobian. Barycenter rows use frozen normalized dual-area weights."""
    items = cset.constraints if which is None else which
    if not items:
        return sp.csr_matrix((0, 3 * mesh.n_vertices))
    return sp.csr_matrix(sp.vstack([_jacobian_rows(c, mesh) for c in items]))


def positional_rows(cset, mesh: TriMesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Scalar rows ``C`` (``r x |V|``) of positional constraints and their residuals ``(r, 3)``."""
    n = mesh.n_vertices
    rows, vals = [], []
    for c in cset.positional:
        if isinstance(c, Barycenter):
            rows.append(sp.csr_matrix(_barycenter_weights(mesh, c.component)[None, :]))
        else:
            rows.append(sp.csr_matrix(([1.0], ([0], [c.vertex])), shape=(1, n)))
        vals.append(_value(c, mesh, 0.0, 0.0))
    if not rows:
        return sp.csr_matrix((0, n)), np.zeros((0, 3))
    return sp.csr_matrix(sp.vstack(rows)), np.array(vals)


# -- Schur complement ----------------------------------------------------------


@dataclass(eq=False)
class SchurCache:
    """``Z = A3^-1 dPhi^T`` for the Schur rows and the ``k x k`` complement ``-dPhi Z``."""

    system: SaddleSystem
    jacobian: sp.csr_matrix  # Schur rows only
    Z: np.ndarray  # (k, n, 3)
    complement: np.ndarray  # (k, k)
    lu: tuple | None
    reports: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def k(self) -> int:
        return self.jacobian.shape[0]

    @property
    def n_solves(self) -> int:
        return len(self.reports)


def schur_build(system: SaddleSystem, cset, mesh: TriMesh, tol: float = 1e-6,
                max_iter: int = 600) -> SchurCache:
    J = constraint_jacobian(cset, mesh, cset.schur)
    n = mesh.n_vertices
    Z = np.zeros((J.shape[0], n, 3))
    reports = []
    for r in range(J.shape[0]):
        row = J[r].toarray().reshape(n, 3)
        Z[r], _, rep = solve(system, row, tol=tol, max_iter=max_iter)
        reports.append(rep)
    S = -(J @ Z.reshape(len(Z), -1).T) if len(Z) else np.zeros((0, 0))
    lu = sl.lu_factor(S) if len(Z) else None
    return SchurCache(system, J, Z, S, lu, reports, tol)


def project_direction(cache: SchurCache, g: np.ndarray, max_iter: int = 600) -> tuple[np.ndarray, SolveReport]:
    """Constrained descent direction for differential ``g`` (shape ``(n, 3)``).

    ``x = A3^-1 (-g) + Z (M/A)^-1 dPhi A3^-1 (-g)``; one new solve.
    """
    x0, _, rep = solve(cache.system, -np.asarray(g), tol=cache.tol, max_iter=max_iter)
    if cache.k == 0:
        return x0, rep
    lam = sl.lu_solve(cache.lu, cache.jacobian @ x0.ravel())
    return x0 + np.tensordot(lam, cache.Z, axes=1), rep


def corrective_step(cache: SchurCache, residual: np.ndarray) -> np.ndarray:
    """Least-norm (in the cached metric) step ``h`` with ``dPhi h = -residual`` for the Schur rows."""
    residual = np.asarray(residual, dtype=float)
    if cache.k == 0 or not np.any(residual):
        return np.zeros((cache.system.n, 3))
    lam = sl.lu_solve(cache.lu, residual)
    return np.tensordot(lam, cache.Z, axes=1)


# -- full projection ------------------------------------------------------------


def project_positions(cset, mesh: TriMesh, cache: SchurCache | None = None, tol: float = 1e-10,
                      max_iter: int = 8) -> tuple[TriMesh, np.ndarray]:
    """Newton projection of ``mesh`` onto ``Phi = 0``.

    With a Schur cache, each step combines the cheap positional correction
    (least-norm in the cotan stiffness, i.e. translations for barycenters) with
    ``Z lambda`` for the Schur rows, where ``lambda`` solves the current
    ``dPhi Z`` system. Without one (e.g. right after remeshing) the metric is
    the sparse ``(stiffness + mass) x I3`` and the saddle system is factorized
    directly. Returns the projected mesh and its normalized residual.
    """
    for _ in range(max_iter):
        res = normalized_residual(cset, mesh)
        if not len(res) or np.abs(res).max() <= tol:
            return mesh, res
        if cache is not None:
            step = _cached_step(cset, mesh, cache)
        else:
            step = _sparse_step(cset, mesh)
        mesh = mesh.with_positions(mesh.positions + step)
    return mesh, normalized_residual(cset, mesh)


def _cached_step(cset, mesh: TriMesh, cache: SchurCache) -> np.ndarray:
    n = mesh.n_vertices
    C, pos_res = positional_rows(cset, mesh)
    h = np.zeros((n, 3))
    if C.shape[0]:
        L, _ = build_laplacian(mesh)
        rhs = np.zeros((n + C.shape[0], 3))
        rhs[n:] = -pos_res
        h = spla.splu(saddle_matrix(L, C)).solve(rhs)[:n]
    if cache.k:
        J = constraint_jacobian(cset, mesh, cset.schur)
        phi = constraint_value(cset, mesh, cset.schur)
        JZ = J @ cache.Z.reshape(cache.k, -1).T
        lam = np.linalg.solve(JZ, -phi - J @ h.ravel())
        h = h + np.tensordot(lam, cache.Z, axes=1)
    return h


def _sparse_step(cset, mesh: TriMesh) -> np.ndarray:
    n = mesh.n_vertices
    L, M = build_laplacian(mesh)
    G = sp.kron(L + M, sp.eye(3), format="csr")
    J = constraint_jacobian(cset, mesh)
    phi = constraint_value(cset, mesh)
    K = sp.bmat([[G, J.T], [J, None]], format="csc")
    rhs = np.concatenate([np.zeros(3 * n), -phi])
    return spla.splu(K).solve(rhs)[: 3 * n].reshape(n, 3)
