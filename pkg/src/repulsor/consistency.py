"""Consistency studies: discrete energy against analytic or quadrature references.

The round sphere has constant kernel ``(2R)^-p`` (every tangent sphere is the
sphere itself), so its energy is ``(4 pi R^2)^2 (2R)^-p``. The torus of
revolution has no closed form; its reference is a midpoint quadrature of the
smooth double integral on the parameter grid, extrapolated from two grid
levels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import shapes
from .barnes_hut import BhParams, bh_energy
from .bvh import BvhParams, build_bvh
from .mesh import TriMesh
from .tpe import EnergyParams, energy_exact

log = logging.getLogger(__name__)

SURFACES = ("sphere", "torus")


def sphere_reference(radius: float = 1.0, p: float = 6.0) -> float:
    """Tangent-point energy of the round sphere."""
    return (4.0 * math.pi * radius**2) ** 2 * (2.0 * radius) ** (-p)


def torus_quadrature(major: float, minor: float, n_minor: int, p: float = 6.0) -> float:
    """Midpoint rule on an ``(aspect * n_minor) x n_minor`` parameter grid.

    The integrand is bounded on the diagonal; the coincident sample is
    dropped. Rotational symmetry reduces the outer sum to one meridian.
    """
    n_major = max(1, round(n_minor * major / minor))
    du, dv = 2 * np.pi / n_major, 2 * np.pi / n_minor
    U, V = np.meshgrid((np.arange(n_major) + 0.5) * du, (np.arange(n_minor) + 0.5) * dv, indexing="ij")
    ring = major + minor * np.cos(V)
    X = np.stack([ring * np.cos(U), ring * np.sin(U), minor * np.sin(V)], -1).reshape(-1, 3)
    N = np.stack([np.cos(V) * np.cos(U), np.cos(V) * np.sin(U), np.sin(V)], -1).reshape(-1, 3)
    w = (minor * ring * du * dv).reshape(-1)
    total = 0.0
    for j in range(n_minor):  # the first meridian occupies rows 0 .. n_minor - 1
        d = X[j] - X
        r2 = np.einsum("ij,ij->i", d, d)
        r2[j] = 1.0
        k = np.abs(d @ N[j]) ** p / r2**p
        k[j] = 0.0
        total += w[j] * (k @ w)
    return n_major * total


def torus_reference(major: float = 1.0, minor: float = 1.0 / 3.0, p: float = 6.0,
                    n_minor: int = 128) -> tuple[float, float]:
    """Richardson-extrapolated quadrature value and its estimated relative error.

    The midpoint rule converges at second order here, so the grids ``n`` and
    ``2 n`` combine as ``(4 E_2n - E_n) / 3``; the error estimate compares that
    with the extrapolation from ``n / 2`` and ``n``.
    """
    e = [torus_quadrature(major, minor, n, p) for n in (n_minor // 2, n_minor, 2 * n_minor)]
    fine = (4 * e[2] - e[1]) / 3
    coarse = (4 * e[1] - e[0]) / 3
    return fine, abs(fine - coarse) / abs(fine)


def longest_edge(mesh: TriMesh) -> float:
    e = mesh.edges
    return float(np.linalg.norm(mesh.positions[e[:, 1]] - mesh.positions[e[:, 0]], axis=1).max())


def fitted_rate(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


@dataclass
class LevelRow:
    level: int
    n_faces: int
    h: float
    energy: float
    rel_error: float


@dataclass
class ThetaRow:
    theta: float
    energy: float
    deviation: float  # relative to the exact discrete energy of the same mesh


@dataclass
class ConsistencyReport:
    surface: str
    p: float
    reference: float
    reference_error: float
    levels: list[LevelRow] = field(default_factory=list)
    rate: float = float("nan")
    sweep_faces: int = 0
    thetas: list[ThetaRow] = field(default_factory=list)
    theta_rate: float = float("nan")

    @property
    def errors_decreasing(self) -> bool:
        err = [r.rel_error for r in self.levels]
        return all(b < a for a, b in zip(err, err[1:]))


def study_mesh(surface: str, level: int, radius: float = 1.0, major: float = 1.0,
               minor: float = 1.0 / 3.0) -> TriMesh:
    """Sphere: icosphere of subdivision ``level``. Torus: ``(aspect * 8 * 2^level) x (8 * 2^level)`` grid."""
    if surface == "sphere":
        return shapes.icosphere(level, radius)
    if surface == "torus":
        n = 8 * 2**level
        return shapes.torus(major, minor, max(3, round(n * major / minor)), n)
    raise ValueError(f"surface must be one of {SURFACES}")


def consistency_study(surface: str = "sphere", levels=(3, 4, 5), thetas=(1.0, 0.5, 0.25, 0.0),
                      p: float = 6.0, radius: float = 1.0, major: float = 1.0, minor: float = 1.0 / 3.0,
                      sweep_mesh: TriMesh | None = None, leaf_size: int = 8) -> ConsistencyReport:
    """Energy error per refinement level and Barnes-Hut deviation per ``theta``.

    The ``theta`` sweep runs on ``sweep_mesh`` (default: the finest level).
    Rates are least-squares slopes in log-log space; ``theta = 0`` rows are
    excluded from the ``theta`` fit.
    """
    params = EnergyParams(p, subcritical=p <= 4)
    if surface == "sphere":
        ref, ref_err = sphere_reference(radius, p), 0.0
    elif surface == "torus":
        ref, ref_err = torus_reference(major, minor, p)
    else:
        raise ValueError(f"surface must be one of {SURFACES}")
    report = ConsistencyReport(surface, p, ref, ref_err)
    mesh = None
    for level in levels:
        mesh = study_mesh(surface, level, radius, major, minor)
        e = energy_exact(mesh, params)
        report.levels.append(LevelRow(level, mesh.n_faces, longest_edge(mesh), e, abs(e - ref) / ref))
        log.info("%s level %d: %d faces, energy %.8g", surface, level, mesh.n_faces, e)
    if len(report.levels) >= 2:
        report.rate = fitted_rate([r.h for r in report.levels], [r.rel_error for r in report.levels])
    if thetas:
        if sweep_mesh is None:
            if mesh is None:
                raise ValueError("a theta sweep needs a mesh level or sweep_mesh")
            sweep_mesh, exact = mesh, report.levels[-1].energy
        else:
            exact = energy_exact(sweep_mesh, params)
        tree = build_bvh(sweep_mesh, BvhParams(leaf_size))
        report.sweep_faces = sweep_mesh.n_faces
        for theta in thetas:
            e = bh_energy(sweep_mesh, tree, params, BhParams(theta))
            report.thetas.append(ThetaRow(theta, e, abs(e - exact) / exact))
        fit = [r for r in report.thetas if r.theta > 0]
        if len(fit) >= 2:
            report.theta_rate = fitted_rate([r.theta for r in fit], [r.deviation for r in fit])
    return report


def format_report(report: ConsistencyReport) -> str:
    lines = [
        f"surface {report.surface}, p = {report.p:g}, reference {report.reference:.10g}"
        + (f" (estimated relative error {report.reference_error:.1e})" if report.reference_error else ""),
        f"{'level':>5} {'faces':>8} {'h':>10} {'energy':>16} {'rel. error':>11}",
    ]
    for r in report.levels:
        lines.append(f"{r.level:>5} {r.n_faces:>8} {r.h:>10.5f} {r.energy:>16.10g} {r.rel_error:>11.3e}")
    lines.append(f"fitted rate in h: {report.rate:.3f}")
    if report.thetas:
        lines.append(f"Barnes-Hut sweep on {report.sweep_faces} faces")
        lines.append(f"{'theta':>6} {'energy':>16} {'deviation':>11}")
        for r in report.thetas:
            lines.append(f"{r.theta:>6.3g} {r.energy:>16.10g} {r.deviation:>11.3e}")
        lines.append(f"fitted rate in theta: {report.theta_rate:.3f}")
    return "\n".join(lines)
