"""Triangle mesh container, per-face geometry, cotan operators and OBJ I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Invalid mesh topology, geometry or file contents."""


@dataclass(frozen=True)
class FaceGeometry:
    area: float
    normal: np.ndarray
    barycenter: np.ndarray
    projector: np.ndarray


@dataclass(eq=False)
class TriMesh:
    """Vertex positions plus oriented triangles.

    ``positions`` is ``(n, 3)`` float, ``faces`` is ``(m, 3)`` int. Connected
    components are labelled on construction unless ``component_of`` is given.
    Geometry caches are computed lazily and never invalidated, so treat a
    mesh as immutable and use :meth:`with_positions` for updates.
    """

    positions: np.ndarray
    faces: np.ndarray
    component_of: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise MeshError("positions must have shape (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must have shape (m, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.positions)):
            raise MeshError("face index out of range")
        if self.component_of is None:
            self.component_of = label_components(len(self.positions), self.faces)
        else:
            self.component_of = np.asarray(self.component_of, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_components(self) -> int:
        return int(self.component_of.max()) + 1 if len(self.component_of) else 0

    def with_positions(self, positions: np.ndarray) -> TriMesh:
        return TriMesh(positions, self.faces, self.component_of)

    def copy(self) -> TriMesh:
        return TriMesh(self.positions.copy(), self.faces.copy(), self.component_of.copy())

    # -- per-face geometry ------------------------------------------------

    @cached_property
    def corners(self) -> np.ndarray:
        """``(m, 3, 3)`` array of corner positions."""
        return self.positions[self.faces]

    @cached_property
    def face_cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        return self.face_cross / (2.0 * self.face_areas[:, None])

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def face_radii(self) -> np.ndarray:
        """Distance from each barycenter to its farthest corner."""
        return np.linalg.norm(self.corners - self.barycenters[:, None, :], axis=2).max(axis=1)

    @cached_property
    def vertex_areas(self) -> np.ndarray:
        """One third of the incident face areas."""
        out = np.zeros(self.n_vertices)
        np.add.at(out, self.faces.ravel(), np.repeat(self.face_areas / 3.0, 3))
        return out

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Unit area-weighted vertex normals."""
        out = np.zeros((self.n_vertices, 3))
        for k in range(3):
            np.add.at(out, self.faces[:, k], self.face_cross)
        norm = np.linalg.norm(out, axis=1)
        norm[norm == 0] = 1.0
        return out / norm[:, None]

    # -- topology -----------------------------------------------------------

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` with ``edges[:, 0] < edges[:, 1]``."""
        return self._edge_topology[0]

    @cached_property
    def edge_faces(self) -> np.ndarray:
        """``(E, 2)`` adjacent faces per edge, ``-1`` marks a missing side."""
        return self._edge_topology[1]

    @cached_property
    def _edge_topology(self):
        he = np.stack([self.faces, np.roll(self.faces, -1, axis=1)], axis=2).reshape(-1, 2)
        key = np.sort(he, axis=1)
        edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if counts.size and counts.max() > 2:
            raise MeshError("non-manifold edge shared by more than two faces")
        face_of_he = np.repeat(np.arange(self.n_faces), 3)
        ef = -np.ones((len(edges), 2), dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        sorted_inv = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_inv[1:] != sorted_inv[:-1]
        ef[sorted_inv[first], 0] = face_of_he[order[first]]
        ef[sorted_inv[~first], 1] = face_of_he[order[~first]]
        return edges, ef

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Oriented boundary edges ``(u, v)`` following their face's winding."""
        mask = self.edge_faces[:, 1] < 0
        out = []
        for e, f in zip(self.edges[mask], self.edge_faces[mask, 0]):
            tri = list(self.faces[f])
            k = tri.index(e[0])
            if tri[(k + 1) % 3] == e[1]:
                out.append((e[0], e[1]))
            else:
                out.append((e[1], e[0]))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    def boundary_loops(self) -> list[np.ndarray]:
        """Ordered vertex loops along the boundary."""
        nxt = {int(u): int(v) for u, v in self.boundary_edges}
        loops, seen = [], set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop, v = [], start
            while v not in seen:
                seen.add(v)
                loop.append(v)
                v = nxt[v]
            loops.append(np.array(loop, dtype=np.int64))
        return loops

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(self.edges) + self.n_faces


def label_components(n_vertices: int, faces: np.ndarray) -> np.ndarray:
    """Connected component id per vertex (flood fill over face adjacency)."""
    faces = np.asarray(faces, dtype=np.int64)
    rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    _, labels = csgraph.connected_components(adj, directed=False)
    # relabel in order of first appearance so ids are deterministic
    _, first = np.unique(labels, return_index=True)
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[np.argsort(first)] = np.arange(len(first))
    return remap[labels]


def validate_mesh(mesh: TriMesh) -> None:
    """Raise :class:`MeshError` unless the mesh is an oriented manifold without degenerate faces."""
    f = mesh.faces
    if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise MeshError("face references a repeated vertex")
    he = np.stack([f, np.roll(f, -1, axis=1)], axis=2).reshape(-1, 2)
    _, counts = np.unique(he, axis=0, return_counts=True)
    if counts.size and counts.max() > 1:
        raise MeshError("inconsistent orientation or duplicated face")
    mesh.edges  # raises on non-manifold edges
    bad = np.flatnonzero(mesh.face_areas < DEGENERATE_AREA)
    if bad.size:
        raise MeshError(f"degenerate face {bad[0]} (area {mesh.face_areas[bad[0]]:.3e})")
    # every boundary vertex must have a single boundary loop passing through it
    be = mesh.boundary_edges
    if len(be):
        if np.bincount(be[:, 0], minlength=mesh.n_vertices).max() > 1:
            raise MeshError("non-manifold vertex on the boundary")


def face_geometry(mesh: TriMesh, face: int) -> FaceGeometry:
    area = float(mesh.face_areas[face])
    if area < DEGENERATE_AREA:
        raise MeshError(f"degenerate face {face}")
    n = mesh.face_normals[face].copy()
    return FaceGeometry(area, n, mesh.barycenters[face].copy(), np.outer(n, n))


def cotan_weights(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-cotangent of the angle opposite each face edge.

    Returns ``(i, j, w)`` over the three edges of every face; ``w`` is
    ``cot(angle at k) / 2`` for the edge ``(i, j)`` opposite corner ``k``.
    """
    c = mesh.corners
    ii, jj, ww = [], [], []
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        u = c[:, i] - c[:, k]
        v = c[:, j] - c[:, k]
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        ii.append(mesh.faces[:, i])
        jj.append(mesh.faces[:, j])
        ww.append(0.5 * cot)
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(ww)


def build_laplacian(mesh: TriMesh) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Cotan stiffness (positive semidefinite, zero row sums) and lumped mass."""
    if np.any(mesh.face_areas < DEGENERATE_AREA):
        raise MeshError("degenerate face in Laplacian assembly")
    i, j, w = cotan_weights(mesh)
    n = mesh.n_vertices
    off = sparse.coo_matrix((-w, (i, j)), shape=(n, n))
    off = off + off.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = (off + sparse.diags(diag)).tocsr()
    mass = sparse.diags(mesh.vertex_areas).tocsr()
    return stiffness, mass


def totals(mesh: TriMesh) -> tuple[float, float]:
    """Total area and signed enclosed volume."""
    c = mesh.corners
    vol = np.einsum("ij,ij->", c[:, 0], np.cross(c[:, 1], c[:, 2])) / 6.0
    return float(mesh.face_areas.sum()), float(vol)


def area_gradient(mesh: TriMesh) -> np.ndarray:
    """Gradient of total area with respect to positions, ``(n, 3)``."""
    c, n = mesh.corners, mesh.face_normals
    out = np.zeros_like(mesh.positions)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        np.add.at(out, mesh.faces[:, k], 0.5 * np.cross(c[:, j] - c[:, l], n))
    return out


def volume_gradient(mesh: TriMesh) -> np.ndarray:
    """Gradient of signed volume with respect to positions, ``(n, 3)``."""
    c = mesh.corners
    out = np.zeros_like(mesh.positions)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        np.add.at(out, mesh.faces[:, k], np.cross(c[:, j], c[:, l]) / 6.0)
    return out


# -- OBJ -------------------------------------------------------------------


def load_obj(path: str | Path) -> TriMesh:
    """Read ``v``/``f`` records from a Wavefront OBJ file (1-based, triangles only)."""
    positions, faces, face_lines = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    if len(rest) < 3:
                        raise MeshError(f"line {lineno}: vertex needs three coordinates")
                    positions.append([float(x) for x in rest[:3]])
                elif tag == "f":
                    if len(rest) != 3:
                        raise MeshError(f"line {lineno}: non-triangular face ({len(rest)} vertices)")
                    idx = [int(tok.split("/")[0]) for tok in rest]
                    faces.append([i - 1 if i > 0 else len(positions) + i for i in idx])
                    face_lines.append(lineno)
            except ValueError as err:
                if isinstance(err, MeshError):
                    raise
                raise MeshError(f"line {lineno}: cannot parse {raw.strip()!r}") from err
    positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    for tri, lineno in zip(faces, face_lines):
        if tri.min() < 0 or tri.max() >= len(positions):
            raise MeshError(f"line {lineno}: vertex index out of range")
        if len(set(tri.tolist())) < 3:
            raise MeshError(f"line {lineno}: face repeats a vertex")
    mesh = TriMesh(positions, faces)
    bad = np.flatnonzero(mesh.face_areas < DEGENERATE_AREA)
    if bad.size:
        raise MeshError(f"line {face_lines[bad[0]]}: degenerate face")
    validate_mesh(mesh)
    return mesh


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.positions]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
