"""Exact all-pairs discrete tangent-point energy and its differential."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .mesh import TriMesh

COINCIDENT = 1e-14


@dataclass(frozen=True)
class EnergyParams:
    """Tangent-point exponent ``p``.

    ``p <= 4`` makes the energy scale-reducible and finite on self-intersecting
    surfaces; it is only accepted with ``subcritical=True``.
    """

    p: float = 6.0
    subcritical: bool = False

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError("exponent p must be positive")
        if not self.subcritical and self.p <= 4:
            raise ValueError("p <= 4 requires subcritical=True")

    @property
    def s(self) -> float:
        """Sobolev order of the energy, ``2 - 2/p``."""
        return 2.0 - 2.0 / self.p


def kernel(x, projector, y, p: float) -> float:
    """``|P (x - y)|^p / |x - y|^(2p)``; equals ``(2 r)^-p`` for tangent-point radius ``r``."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r2 = float(d @ d)
    if r2 < COINCIDENT**2:
        raise ValueError("kernel evaluated at coincident points")
    return float(np.linalg.norm(np.asarray(projector) @ d) ** p / r2**p)


def _pair_chunks(n: int, budget: int = 4_000_000):
    step = max(1, budget // max(n, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


@njit(cache=True)
def _pair_sum(X, N, a, p):
    """``sum_{S != T} (q^2 / r^4)^(p/2) a_S a_T``; returns -1 on coincident barycenters."""
    m = len(a)
    half = 0.5 * p
    n_half = int(half)
    integer = half == n_half
    total = 0.0
    for i in range(m):
        row = 0.0
        for j in range(m):
            if j == i:
                continue
            d0, d1, d2 = X[i, 0] - X[j, 0], X[i, 1] - X[j, 1], X[i, 2] - X[j, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 < COINCIDENT * COINCIDENT:
                return -1.0
            q = N[i, 0] * d0 + N[i, 1] * d1 + N[i, 2] * d2
            base = q * q / (r2 * r2)
            if integer:
                k = 1.0
                for _ in range(n_half):
                    k *= base
            else:
                k = base**half
            row += k * a[j]
        total += a[i] * row
    return total


def energy_exact(mesh: TriMesh, params: EnergyParams = EnergyParams()) -> float:
    """Sum of ``K(S, T) a(S) a(T)`` over all ordered pairs of distinct faces."""
    X, N, a = mesh.barycenters, mesh.face_normals, mesh.face_areas
    total = _pair_sum(np.ascontiguousarray(X), np.ascontiguousarray(N), np.ascontiguousarray(a), float(params.p))
    if total < 0:
        raise ValueError("coincident face barycenters")
    return float(total)


def pullback_face_gradients(mesh: TriMesh, g_bary, g_normal, g_area) -> np.ndarray:
    """Chain rule from per-face barycenter/normal/area gradients to vertex positions."""
    c = mesh.corners
    n = mesh.face_normals
    twice_area = 2.0 * mesh.face_areas
    # gradient wrt the unnormalized cross product c: (I - N N^T) g_N / |c| + g_a N / 2
    g_n = np.asarray(g_normal)
    w = (g_n - np.einsum("ij,ij->i", g_n, n)[:, None] * n) / twice_area[:, None]
    w += 0.5 * np.asarray(g_area)[:, None] * n
    out = np.zeros_like(mesh.positions)
    gb = np.asarray(g_bary) / 3.0
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        np.add.at(out, mesh.faces[:, k], gb + np.cross(c[:, j] - c[:, l], w))
    return out


def face_gradients_exact(mesh: TriMesh, params: EnergyParams = EnergyParams()):
    """Per-face partials of the exact energy: ``(d/dX, d/dN, d/da)``, each summed over pairs."""
    X, N, a, p = mesh.barycenters, mesh.face_normals, mesh.face_areas, params.p
    m = len(a)
    gX = np.zeros((m, 3))
    gN = np.zeros((m, 3))
    ga = np.zeros(m)
    for rows in _pair_chunks(m, 2_000_000):
        idx = np.arange(rows.start, rows.stop)
        loc = idx - rows.start
        d = X[rows, None, :] - X[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[loc, idx] = 1.0
        q = np.einsum("ik,ijk->ij", N[rows], d)
        aq = np.abs(q)
        k = aq**p / r2**p
        k[loc, idx] = 0.0
        # |q|^(p-2) q, written to stay finite at q = 0
        qpow = np.sign(q) * aq ** (p - 1)
        qpow[loc, idx] = 0.0
        w = a[rows, None] * a[None, :]
        coef_n = w * p * qpow / r2**p  # multiplies N_S in dK/dd and d in dK/dN
        coef_d = -2.0 * p * w * k / r2
        dkdd = coef_n[..., None] * N[rows, None, :] + coef_d[..., None] * d
        gX[rows] += dkdd.sum(axis=1)
        gX -= dkdd.sum(axis=0)
        gN[rows] += np.einsum("ij,ijk->ik", coef_n, d)
        ga[rows] += k @ a
        ga += a[rows] @ k
    return gX, gN, ga


def differential_exact(mesh: TriMesh, params: EnergyParams = EnergyParams()) -> np.ndarray:
    """Exact differential of :func:`energy_exact` as an ``(n, 3)`` array (row-major = 3|V| covector)."""
    return pullback_face_gradients(mesh, *face_gradients_exact(mesh, params))
