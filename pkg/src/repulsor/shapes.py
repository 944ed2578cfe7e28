"""Procedural test surfaces."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def tetrahedron(scale: float = 1.0) -> TriMesh:
    pos = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * scale
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(pos, faces)


def cube(size: float = 1.0) -> TriMesh:
    """Axis-aligned cube ``[0, size]^3`` split into 12 outward-facing triangles."""
    pos = np.array(
        [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
    ) * size
    quads = [
        (0, 1, 3, 2),  # x = 0
        (4, 6, 7, 5),  # x = 1
        (0, 4, 5, 1),  # y = 0
        (2, 3, 7, 6),  # y = 1
        (0, 2, 6, 4),  # z = 0
        (1, 5, 7, 3),  # z = 1
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriMesh(pos, np.array(faces))


def icosphere(level: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Loop-subdivided icosahedron projected to a sphere; ``20 * 4**level`` faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    pos = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = pos[a] + pos[b]
                pos.append(m / np.linalg.norm(m))
                cache[key] = len(pos) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    pos = np.array(pos) * radius + np.asarray(center, dtype=float)
    return TriMesh(pos, np.array(faces))


def torus(major: float = 1.0, minor: float = 1.0 / 3.0, n_major: int = 48, n_minor: int = 16) -> TriMesh:
    """Torus of revolution about the z axis sampled on a regular parameter grid."""
    phi = 2 * np.pi * np.arange(n_major) / n_major
    theta = 2 * np.pi * np.arange(n_minor) / n_minor
    P, T = np.meshgrid(phi, theta, indexing="ij")
    ring = major + minor * np.cos(T)
    pos = np.stack([ring * np.cos(P), ring * np.sin(P), minor * np.sin(T)], axis=-1).reshape(-1, 3)
    idx = np.arange(n_major * n_minor).reshape(n_major, n_minor)
    i0 = idx
    i1 = np.roll(idx, -1, axis=0)
    i2 = np.roll(np.roll(idx, -1, axis=0), -1, axis=1)
    i3 = np.roll(idx, -1, axis=1)
    faces = np.concatenate(
        [np.stack([i0, i1, i2], -1).reshape(-1, 3), np.stack([i0, i2, i3], -1).reshape(-1, 3)]
    )
    return TriMesh(pos, faces)


def bumpy(mesh: TriMesh, amplitude: float = 0.15, frequency: float = 3, seed: int = 0) -> TriMesh:
    """Scale positions radially by ``1 + amplitude * b(x)``, ``b`` a mean of six random plane waves."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * np.pi, size=6)
    x = mesh.positions
    bump = sum(np.cos(frequency * x @ d + ph) for d, ph in zip(dirs, phases)) / len(dirs)
    return mesh.with_positions(x * (1.0 + amplitude * bump)[:, None])


def bumpy_sphere(level: int = 3, amplitude: float = 0.15, frequency: int = 3, seed: int = 0) -> TriMesh:
    """Unit icosphere with a smooth random radial displacement."""
    return bumpy(icosphere(level), amplitude, frequency, seed)


def ellipsoid(level: int = 3, axes=(1.4, 1.0, 0.7)) -> TriMesh:
    mesh = icosphere(level)
    return mesh.with_positions(mesh.positions * np.asarray(axes, dtype=float))


def disk(n_rings: int = 4, radius: float = 1.0, z: float = 0.0) -> TriMesh:
    """Planar triangulated disk in the plane ``z = const``, counter-clockwise seen from +z."""
    pos = [np.array([0.0, 0.0, z])]
    rings = [[0]]
    for r in range(1, n_rings + 1):
        count = 6 * r
        ang = 2 * np.pi * np.arange(count) / count
        start = len(pos)
        pos += [np.array([radius * r / n_rings * np.cos(a), radius * r / n_rings * np.sin(a), z]) for a in ang]
        rings.append(list(range(start, start + count)))
    faces = []
    for r in range(1, n_rings + 1):
        inner, outer = rings[r - 1], rings[r]
        for s in range(6):
            for k in range(r):
                o = s * r + k
                o_next = (o + 1) % len(outer)
                if r == 1:
                    faces.append((0, outer[o], outer[o_next]))
                    continue
                i = s * (r - 1) + k
                faces.append((inner[i % len(inner)], outer[o], outer[o_next]))
                if k < r - 1:
                    faces.append((inner[i % len(inner)], outer[o_next], inner[(i + 1) % len(inner)]))
    return TriMesh(np.array(pos), np.array(faces))


def regular_polygon_disk(n: int, radius: float = 1.0) -> TriMesh:
    """Fan of ``n`` triangles around a center vertex; boundary is a regular n-gon."""
    ang = 2 * np.pi * np.arange(n) / n
    pos = np.vstack([[0.0, 0.0, 0.0], np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)], 1)])
    faces = [(0, 1 + k, 1 + (k + 1) % n) for k in range(n)]
    return TriMesh(pos, np.array(faces))


def strip(lengths, width: float = 1.0) -> TriMesh:
    """Planar quad strip along x with the given segment lengths, two triangles per quad."""
    xs = np.concatenate([[0.0], np.cumsum(lengths)])
    pos = np.array([[x, y, 0.0] for x in xs for y in (0.0, width)])
    faces = []
    for k in range(len(lengths)):
        a, b, c, d = 2 * k, 2 * k + 2, 2 * k + 3, 2 * k + 1
        faces += [(a, b, c), (a, c, d)]
    return TriMesh(pos, np.array(faces))


def merge(*meshes: TriMesh) -> TriMesh:
    pos, faces, offset = [], [], 0
    for m in meshes:
        pos.append(m.positions)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriMesh(np.vstack(pos), np.vstack(faces))
