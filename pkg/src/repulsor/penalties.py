"""Soft penalty potentials added to the objective with weights.

Every penalty returns ``(value, gradient)`` with the gradient shaped ``(n, 3)``.
Pointwise potentials (obstacles, attractors) are integrated over the surface
with vertex dual areas: ``sum_v A_v phi(f(v))``, differentiated through both
``phi`` and ``A_v``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .barnes_hut import bh_point_potential
from .bvh import BvhTree, build_bvh
from .mesh import TriMesh, area_gradient, build_laplacian, totals, volume_gradient


class PenaltyError(ValueError):
    pass


def weighted_area_gradient(mesh: TriMesh, w: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_S w_S a_S`` for fixed per-face weights ``w``."""
    c, n = mesh.corners, mesh.face_normals
    out = np.zeros_like(mesh.positions)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        np.add.at(out, mesh.faces[:, k], 0.5 * w[:, None] * np.cross(c[:, j] - c[:, l], n))
    return out


def integrate_pointwise(mesh: TriMesh, phi: np.ndarray, grad_phi: np.ndarray):
    """``sum_v A_v phi_v`` and its gradient, with ``A_v`` one third of the incident area."""
    value = float(mesh.vertex_areas @ phi)
    face_w = phi[mesh.faces].sum(axis=1) / 3.0
    return value, mesh.vertex_areas[:, None] * grad_phi + weighted_area_gradient(mesh, face_w)


# -- scalar deviations -----------------------------------------------------------


@dataclass
class AreaDeviation:
    target: float | None = None
    weight: float = 1.0
    name = "area_deviation"

    def initialize(self, mesh: TriMesh):
        if self.target is None:
            self.target = totals(mesh)[0]

    def evaluate(self, mesh: TriMesh):
        if not self.target:
            raise PenaltyError("area target must be nonzero")
        r = totals(mesh)[0] / self.target - 1.0
        return r * r, 2.0 * r / self.target * area_gradient(mesh)


@dataclass
class VolumeDeviation:
    target: float | None = None
    weight: float = 1.0
    name = "volume_deviation"

    def initialize(self, mesh: TriMesh):
        if self.target is None:
            self.target = totals(mesh)[1]

    def evaluate(self, mesh: TriMesh):
        if not self.target:
            raise PenaltyError("volume target must be nonzero")
        r = totals(mesh)[1] / self.target - 1.0
        return r * r, 2.0 * r / self.target * volume_gradient(mesh)


def scalar_penalties(mesh: TriMesh, penalty) -> tuple[float, np.ndarray]:
    return penalty.evaluate(mesh)


# -- implicit fields ----------------------------------------------------------------


@dataclass(frozen=True)
class SphereField:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __call__(self, x):
        d = x - np.asarray(self.center, dtype=float)
        r = np.linalg.norm(d, axis=1)
        return r - self.radius, d / np.where(r > 0, r, 1.0)[:, None]


@dataclass(frozen=True)
class CylinderField:
    """Infinite cylinder around the line through ``point`` along ``axis``."""

    point: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)
    radius: float = 1.0

    def __call__(self, x):
        a = np.asarray(self.axis, dtype=float)
        a = a / np.linalg.norm(a)
        d = x - np.asarray(self.point, dtype=float)
        radial = d - np.outer(d @ a, a)
        r = np.linalg.norm(radial, axis=1)
        return r - self.radius, radial / np.where(r > 0, r, 1.0)[:, None]


@dataclass(frozen=True)
class PlaneField:
    """Half-space; positive on the side ``normal`` points to."""

    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def __call__(self, x):
        nrm = np.asarray(self.normal, dtype=float)
        nrm = nrm / np.linalg.norm(nrm)
        return (x - np.asarray(self.point, dtype=float)) @ nrm, np.tile(nrm, (len(x), 1))


@dataclass(frozen=True)
class SlabField:
    """Solid slab ``|n . (x - point)| <= half_width``; positive outside."""

    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    half_width: float = 0.5

    def __call__(self, x):
        nrm = np.asarray(self.normal, dtype=float)
        nrm = nrm / np.linalg.norm(nrm)
        h = (x - np.asarray(self.point, dtype=float)) @ nrm
        return np.abs(h) - self.half_width, np.sign(h)[:, None] * nrm


@dataclass(frozen=True, eq=False)
class SampledField:
    """Signed distance samples on a regular grid, trilinearly interpolated.

    ``values[i, j, k]`` is the sample at ``origin + (i, j, k) * spacing``.
    Points outside the grid use the linear extension of the nearest cell.
    """

    values: np.ndarray
    origin: tuple
    spacing: tuple

    HEADER = struct.Struct("<3I6d")

    def __post_init__(self):
        if min(self.values.shape) < 2:
            raise ValueError("sampled field needs at least 2 samples per axis")

    def __call__(self, x):
        o = np.asarray(self.origin, dtype=float)
        h = np.asarray(self.spacing, dtype=float)
        dims = np.array(self.values.shape)
        u = (x - o) / h
        i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
        t = u - i0
        v = self.values
        val = np.zeros(len(x))
        grad = np.zeros((len(x), 3))
        for corner in range(8):
            b = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            s = v[i0[:, 0] + b[0], i0[:, 1] + b[1], i0[:, 2] + b[2]]
            w = np.where(b, t, 1.0 - t)  # per-axis weights
            sign = np.where(b, 1.0, -1.0)
            val += s * w.prod(axis=1)
            for a in range(3):
                others = [c for c in range(3) if c != a]
                grad[:, a] += s * sign[a] * w[:, others].prod(axis=1) / h[a]
        return val, grad

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.HEADER.pack(*self.values.shape, *map(float, self.origin), *map(float, self.spacing)))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SampledField":
        """Binary layout: 3 x uint32 dims, 3 x float64 origin, 3 x float64 spacing,
        then float64 samples in C order, all little-endian."""
        raw = Path(path).read_bytes()
        if len(raw) < cls.HEADER.size:
            raise ValueError(f"{path}: truncated header")
        head = cls.HEADER.unpack_from(raw)
        dims, origin, spacing = head[:3], head[3:6], head[6:9]
        count = int(np.prod(dims))
        body = raw[cls.HEADER.size :]
        if len(body) != 8 * count:
            raise ValueError(f"{path}: expected {count} samples, found {len(body) // 8}")
        return cls(np.frombuffer(body, dtype="<f8").reshape(dims).copy(), origin, spacing)


# -- obstacles and attractors ------------------------------------------------------


def _field_values(field_fn, mesh: TriMesh):
    d, g = field_fn(mesh.positions)
    return np.asarray(d, dtype=float), np.asarray(g, dtype=float)


@dataclass(eq=False)
class ImplicitObstacle:
    field: object
    p: float = 6.0
    weight: float = 1.0
    name = "implicit_obstacle"

    def evaluate(self, mesh: TriMesh):
        d, g = _field_values(self.field, mesh)
        bad = np.flatnonzero(d <= 0)
        if len(bad):
            raise PenaltyError(f"vertex {bad[0]} lies on or inside the obstacle (d = {d[bad[0]]:.3g})")
        phi = d ** -self.p
        return integrate_pointwise(mesh, phi, (-self.p * phi / d)[:, None] * g)


@dataclass(eq=False)
class ImplicitAttractor:
    field: object
    p: float = 6.0
    weight: float = 1.0
    name = "implicit_attractor"

    def evaluate(self, mesh: TriMesh):
        d, g = _field_values(self.field, mesh)
        ad = np.abs(d)
        phi = ad**self.p
        dphi = self.p * ad ** (self.p - 1.0) * np.sign(d)
        return integrate_pointwise(mesh, phi, dphi[:, None] * g)


@dataclass(eq=False)
class MeshObstacle:
    """Static obstacle mesh; its potential ``sum_S a_S |X_S - x|^-p`` is evaluated by Barnes-Hut."""

    obstacle: TriMesh
    p: float = 6.0
    weight: float = 1.0
    theta: float = 0.5
    tree: BvhTree | None = field(default=None, repr=False)
    name = "mesh_obstacle"

    def evaluate(self, mesh: TriMesh):
        if self.tree is None:
            self.tree = build_bvh(self.obstacle)
        phi, grad = bh_point_potential(self.tree, mesh.positions, self.p, self.theta)
        bad = np.flatnonzero(~np.isfinite(phi))
        if len(bad):
            raise PenaltyError(f"vertex {bad[0]} coincides with an obstacle face center")
        return integrate_pointwise(mesh, phi, grad)


def obstacle_penalties(mesh: TriMesh, penalty) -> tuple[float, np.ndarray]:
    return penalty.evaluate(mesh)


# -- boundary regularizers -------------------------------------------------------------


def _require_boundary(mesh: TriMesh):
    loops = mesh.boundary_loops()
    if not loops:
        raise PenaltyError("boundary penalty on a closed mesh")
    return loops


@dataclass
class BoundaryLength:
    target: float | None = None
    weight: float = 1.0
    name = "boundary_length"

    def initialize(self, mesh: TriMesh):
        if self.target is None:
            e = mesh.boundary_edges
            x = mesh.positions
            self.target = float(np.linalg.norm(x[e[:, 1]] - x[e[:, 0]], axis=1).sum())

    def evaluate(self, mesh: TriMesh):
        _require_boundary(mesh)
        e = mesh.boundary_edges
        x = mesh.positions
        d = x[e[:, 1]] - x[e[:, 0]]
        length = np.linalg.norm(d, axis=1)
        r = self.target - length.sum()
        grad = np.zeros_like(x)
        u = d / length[:, None]
        np.add.at(grad, e[:, 1], -2.0 * r * u)
        np.add.at(grad, e[:, 0], 2.0 * r * u)
        return r * r, grad


@dataclass
class BoundaryCurvature:
    weight: float = 1.0
    name = "boundary_curvature"

    def evaluate(self, mesh: TriMesh):
        loops = _require_boundary(mesh)
        x = mesh.positions
        grad = np.zeros_like(x)
        value = 0.0
        for loop in loops:
            prev, cur, nxt = np.roll(loop, 1), loop, np.roll(loop, -1)
            e1 = x[cur] - x[prev]
            e2 = x[nxt] - x[cur]
            l1 = np.linalg.norm(e1, axis=1)
            l2 = np.linalg.norm(e2, axis=1)
            u1, u2 = e1 / l1[:, None], e2 / l2[:, None]
            cos = np.clip(np.einsum("ij,ij->i", u1, u2), -1.0, 1.0)
            sin = np.linalg.norm(np.cross(u1, u2), axis=1)
            theta = np.arctan2(sin, cos)
            ell = 0.5 * (l1 + l2)
            value += float((theta**2 / ell).sum())
            # d(theta^2) = 2 theta dtheta, written with theta / sin(theta) so it stays finite at 0
            ratio = np.where(sin > 1e-12, theta / np.where(sin > 1e-12, sin, 1.0), 1.0)
            c = (2.0 * ratio / ell)[:, None]
            g1 = -c * (u2 - cos[:, None] * u1) / l1[:, None]  # wrt e1
            g2 = -c * (u1 - cos[:, None] * u2) / l2[:, None]  # wrt e2
            q = (-(theta**2) / ell**2 * 0.5)[:, None]  # d(1/ell) part, d ell = (u1 de1 + u2 de2) / 2
            g1 += q * u1
            g2 += q * u2
            np.add.at(grad, cur, g1 - g2)
            np.add.at(grad, prev, -g1)
            np.add.at(grad, nxt, g2)
        return value, grad


# -- Willmore ------------------------------------------------------------------------


@dataclass
class Willmore:
    """``f^T A M^-1 A f`` with the cotan stiffness ``A`` and lumped mass ``M``.

    Boundary vertices are left out of the sum (their stiffness rows carry the
    boundary term, not curvature), so flat patches have zero energy. The
    gradient ``2 A M^-1 A f`` treats ``A`` and ``M`` as frozen; when active,
    ``weight * A M^-1 A`` is added to the descent metric.
    """

    weight: float = 1.0
    name = "willmore"

    def operator(self, mesh: TriMesh) -> sp.csr_matrix:
        A, M = build_laplacian(mesh)
        inv = np.where(mesh.boundary_vertices, 0.0, 1.0 / M.diagonal())
        return sp.csr_matrix(A @ sp.diags(inv) @ A)

    def evaluate(self, mesh: TriMesh):
        W = self.operator(mesh)
        Wf = W @ mesh.positions
        return float(np.einsum("ij,ij->", mesh.positions, Wf)), 2.0 * Wf


def boundary_and_fairing(mesh: TriMesh, penalty) -> tuple[float, np.ndarray]:
    return penalty.evaluate(mesh)


# -- sets ------------------------------------------------------------------------------


@dataclass
class PenaltySet:
    penalties: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.penalties)

    def __len__(self):
        return len(self.penalties)

    def initialize(self, mesh: TriMesh, p: float | None = None) -> "PenaltySet":
        for pen in self.penalties:
            if pen.weight < 0:
                raise PenaltyError(f"{pen.name}: weight must be non-negative")
            if p is not None and hasattr(pen, "p") and not isinstance(pen, ImplicitAttractor) and pen.p != p:
                raise PenaltyError(f"{pen.name}: obstacle exponent {pen.p} must match the energy exponent {p}")
            if hasattr(pen, "initialize"):
                pen.initialize(mesh)
        return self

    def evaluate(self, mesh: TriMesh) -> tuple[float, np.ndarray, dict]:
        """Weighted total, its gradient, and the unweighted value of each term."""
        total = 0.0
        grad = np.zeros_like(mesh.positions)
        parts = {}
        for pen in self.penalties:
            v, g = pen.evaluate(mesh)
            parts[pen.name] = parts.get(pen.name, 0.0) + v
            total += pen.weight * v
            grad += pen.weight * g
        return total, grad, parts

    def value(self, mesh: TriMesh) -> float:
        return sum(pen.weight * pen.evaluate(mesh)[0] for pen in self.penalties)

    def metric_term(self, mesh: TriMesh) -> sp.csr_matrix | None:
        """Sparse addition to the scalar metric (Willmore's ``A M^-1 A``), if any."""
        terms = [pen.weight * pen.operator(mesh) for pen in self.penalties if isinstance(pen, Willmore) and pen.weight > 0]
        return sp.csr_matrix(sum(terms)) if terms else None
