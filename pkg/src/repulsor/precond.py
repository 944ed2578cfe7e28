"""Fractional preconditioner and Krylov solves with the descent metric.

Systems are saddle problems ``[[A + E, C^T], [C, 0]]`` applied to each of the
three coordinate columns, where ``C`` holds scalar positional rows (barycenter
weights, pinned vertices) and ``E`` is an optional sparse extra term. Unknowns
are stored as ``(|V| + r, 3)`` blocks and flattened row-major for GMRES.
"""

from __future__ import annotations

import logging
import time
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hmatrix import FractionalStack, hat_gradients
from .mesh import TriMesh, build_laplacian

log = logging.getLogger(__name__)

RESTART = 100


class SingularSystemError(ValueError):
    """Raised when a connected component has no barycenter or pin row."""


@dataclass
class SolveReport:
    iterations: int
    residual: float  # ||A x - b|| / ||b||
    seconds: float
    converged: bool = True


class SolveError(RuntimeError):
    def __init__(self, message: str, x: np.ndarray, report: SolveReport):
        super().__init__(message)
        self.x = x
        self.report = report


def _check_rows(mesh: TriMesh, rows: sp.csr_matrix | None):
    covered = np.zeros(mesh.n_components, dtype=bool)
    if rows is not None and rows.shape[0]:
        touched = np.unique(sp.coo_matrix(rows).col)
        covered[np.unique(mesh.component_of[touched])] = True
    missing = np.flatnonzero(~covered)
    if len(missing):
        raise SingularSystemError(
            f"component(s) {missing.tolist()} have no positional row; "
            "add a barycenter constraint or pin a vertex in each component"
        )


def saddle_matrix(S: sp.spmatrix, rows: sp.spmatrix | None) -> sp.csc_matrix:
    if rows is None or rows.shape[0] == 0:
        return sp.csc_matrix(S)
    r = rows.shape[0]
    return sp.csc_matrix(sp.bmat([[S, rows.T], [rows, sp.csr_matrix((r, r))]]))


@lru_cache(maxsize=16)
def self_interaction_constant(sigma: float, samples: int = 400_000) -> float:
    """``1/2`` times the mean of ``|x - y|^(-2 sigma)`` over point pairs of a unit-area equilateral triangle.

    Seeded Monte Carlo, so the value is reproducible; about 0.2% accurate,
    which is plenty for a preconditioner.
    """
    rng = np.random.default_rng(0)
    side = np.sqrt(4.0 / np.sqrt(3.0))
    tri = np.array([[0.0, 0.0], [side, 0.0], [side / 2, side * np.sqrt(3.0) / 2]])

    def sample():
        u = rng.random((samples, 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1 - u[flip]
        return tri[0] + u[:, :1] * (tri[1] - tri[0]) + u[:, 1:] * (tri[2] - tri[0])

    d = sample() - sample()
    return 0.5 * float(np.mean(np.einsum("ij,ij->i", d, d) ** -sigma))


def self_interaction(mesh: TriMesh, sigma: float) -> sp.csr_matrix:
    """Same-face part of ``L^sigma`` for piecewise-linear functions.

    The barycenter pair sum skips ``S = T``. For linear ``u`` on ``S`` that term
    is ``|grad u|^2 * 1/2 int int_SxS |x - y|^-2sigma``, approximated by
    ``c(sigma) a_S^(2 - sigma)``: a face-weighted cotan stiffness. It vanishes
    against smooth modes as the mesh is refined but restores the order-2 sigma
    growth on oscillating modes with near-zero face averages.
    """
    g = hat_gradients(mesh)
    w = self_interaction_constant(round(float(sigma), 12)) * mesh.face_areas ** (2.0 - sigma)
    vals = w[:, None, None] * np.einsum("fik,fjk->fij", g, g)
    rows = np.repeat(mesh.faces, 3, axis=1).ravel()
    cols = np.tile(mesh.faces, 3).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))


@dataclass(eq=False)
class Preconditioner:
    """``K^-1 G K^-1`` with ``K`` the cotan stiffness augmented by positional rows.

    ``G`` is ``L^sigma`` plus its same-face term (see :func:`self_interaction`).
    """

    stack: FractionalStack
    rows: sp.csr_matrix
    lu: spla.SuperLU = field(repr=False)
    local: sp.csr_matrix = field(repr=False)

    @property
    def n(self) -> int:
        return self.stack.mesh.n_vertices


def build_preconditioner(mesh: TriMesh, stack: FractionalStack,
                         positional_rows: sp.spmatrix | None = None) -> Preconditioner:
    if not 0.0 < stack.sigma < 2.0:
        raise ValueError(f"preconditioner order {stack.sigma} outside (0, 2)")
    _check_rows(mesh, positional_rows)
    stiffness, _ = build_laplacian(mesh)
    rows = sp.csr_matrix(positional_rows) if positional_rows is not None else sp.csr_matrix((0, mesh.n_vertices))
    lu = spla.splu(saddle_matrix(stiffness, rows))
    return Preconditioner(stack, rows, lu, self_interaction(mesh, stack.sigma))


def apply_preconditioner(P: Preconditioner, r: np.ndarray) -> np.ndarray:
    """Two back-substitutions around one ``L^sigma`` product.

    ``r`` has ``|V| + rows`` entries (or that many rows of columns). The row
    part of ``r`` only enters the second solve, so the output satisfies
    ``C x = r_rows`` exactly. The multiplier part of the output is the one
    from the first solve: a residual ``C^T alpha`` maps to ``(0, alpha)``,
    keeping the map nonsingular.
    """
    r = np.asarray(r, dtype=float)
    n = P.n
    first = np.array(r)
    first[n:] = 0.0
    y = P.lu.solve(first)
    z = np.array(r)
    z[:n] = P.stack.apply("Lsigma", y[:n]) + P.local @ y[:n]
    out = P.lu.solve(z)
    out[n:] = y[n:]
    return out


# -- saddle systems ------------------------------------------------------------


@dataclass(eq=False)
class SaddleSystem:
    """Metric operator plus positional rows; ``precondition`` maps residual blocks to corrections."""

    n: int
    rows: sp.csr_matrix
    apply_metric: Callable[[np.ndarray], np.ndarray]
    precondition: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = ""

    @property
    def size(self) -> int:
        return self.n + self.rows.shape[0]

    def matvec_blocks(self, Y: np.ndarray) -> np.ndarray:
        x, lam = Y[: self.n], Y[self.n :]
        out = np.empty_like(Y)
        out[: self.n] = self.apply_metric(x) + self.rows.T @ lam
        out[self.n :] = self.rows @ x
        return out

    def linear_operator(self) -> spla.LinearOperator:
        k = 3 * self.size
        shape = (self.size, 3)
        return spla.LinearOperator(
            (k, k), matvec=lambda v: self.matvec_blocks(v.reshape(shape)).ravel(), dtype=float
        )

    def preconditioner(self) -> spla.LinearOperator | None:
        if self.precondition is None:
            return None
        k = 3 * self.size
        shape = (self.size, 3)
        return spla.LinearOperator((k, k), matvec=lambda v: self.precondition(v.reshape(shape)).ravel(), dtype=float)


def fractional_system(stack: FractionalStack, positional_rows: sp.spmatrix | None = None,
                      low_order: bool = True, extra: sp.spmatrix | None = None,
                      precondition: bool = True) -> SaddleSystem:
    """``A3`` (plus optional sparse ``extra`` per coordinate) with the fractional preconditioner."""
    mesh = stack.mesh
    P = build_preconditioner(mesh, stack, positional_rows)

    def metric(x):
        y = stack.apply("A", x, low_order)
        return y + extra @ x if extra is not None else y

    return SaddleSystem(mesh.n_vertices, P.rows, metric,
                        (lambda r: apply_preconditioner(P, r)) if precondition else None, "Hs")


def baseline_metric(mesh: TriMesh, tag: str) -> sp.csr_matrix:
    """Integer-order inner products: ``L2`` (lumped mass), ``H1`` (stiffness), ``H2`` (``L M^-1 L``)."""
    L, M = build_laplacian(mesh)
    if tag == "L2":
        return sp.csr_matrix(M)
    if tag == "H1":
        return sp.csr_matrix(L)
    if tag == "H2":
        return sp.csr_matrix(L @ sp.diags(1.0 / M.diagonal()) @ L)
    raise ValueError(f"unknown baseline metric {tag!r}")


def sparse_system(mesh: TriMesh, S: sp.spmatrix, positional_rows: sp.spmatrix | None = None,
                  label: str = "") -> SaddleSystem:
    """Sparse metric whose exact saddle factorization serves as the preconditioner."""
    if positional_rows is None:
        positional_rows = sp.csr_matrix((0, mesh.n_vertices))
    if label != "L2":
        _check_rows(mesh, positional_rows)
    rows = sp.csr_matrix(positional_rows)
    lu = spla.splu(saddle_matrix(S, rows))
    S = sp.csr_matrix(S)
    return SaddleSystem(mesh.n_vertices, rows, lambda x: S @ x, lu.solve, label)


def solve(system: SaddleSystem, b: np.ndarray, rhs_rows: np.ndarray | None = None,
          tol: float = 1e-6, max_iter: int = 600, restart: int = RESTART) -> tuple[np.ndarray, np.ndarray, SolveReport]:
    """Solve ``[[A3, C^T], [C, 0]] [x; mu] = [b; rhs_rows]`` by restarted GMRES from zero.

    ``b`` is ``(|V|, 3)`` or flat ``3|V|``; returns ``(x, mu, report)`` with
    ``x`` shaped like ``b``. Raises :class:`SolveError` carrying the best
    iterate when ``max_iter`` inner iterations do not reach ``tol``.
    """
    shape = np.shape(b)
    n, r = system.n, system.rows.shape[0]
    rhs = np.zeros((n + r, 3))
    rhs[:n] = np.asarray(b, dtype=float).reshape(n, 3)
    if rhs_rows is not None:
        rhs[n:] = np.asarray(rhs_rows, dtype=float).reshape(r, 3)
    flat = rhs.ravel()
    bnorm = np.linalg.norm(flat)
    if bnorm == 0.0:
        return np.zeros(shape), np.zeros((r, 3)), SolveReport(0, 0.0, 0.0)
    count = [0]

    def tick(_):
        count[0] += 1

    A = system.linear_operator()
    restart = max(1, min(restart, max_iter))
    t0 = time.perf_counter()
    x, info = spla.gmres(
        A, flat, rtol=tol, atol=0.0, restart=restart, maxiter=max(1, -(-max_iter // restart)),
        M=system.preconditioner(), callback=tick, callback_type="pr_norm",
    )
    seconds = time.perf_counter() - t0
    residual = float(np.linalg.norm(A @ x - flat) / bnorm)
    report = SolveReport(count[0], residual, seconds, info == 0 and residual <= tol * (1 + 1e-9))
    X = x.reshape(n + r, 3)
    log.debug("%s solve: %d iterations, residual %.2e, %.3fs", system.label, count[0], residual, seconds)
    if not report.converged:
        raise SolveError(f"GMRES did not reach {tol:g} in {max_iter} iterations (residual {residual:.2e})",
                         X[:n].reshape(shape), report)
    return X[:n].reshape(shape), X[n:], report


def solve_A3(stack: FractionalStack, P: Preconditioner, b: np.ndarray, tol: float = 1e-6,
             max_iter: int = 600, low_order: bool = True) -> tuple[np.ndarray, SolveReport]:
    """``A3 x = b`` on the subspace fixed by the preconditioner's positional rows."""

    def metric(x):
        return stack.apply("A", x, low_order)

    system = SaddleSystem(P.n, P.rows, metric, lambda r: apply_preconditioner(P, r), "Hs")
    x, _, report = solve(system, b, tol=tol, max_iter=max_iter)
    return x, report
