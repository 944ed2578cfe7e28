"""Bounding-volume hierarchy over mesh faces with per-cluster aggregates.

Nodes are numbered in depth-first pre-order, so every child has a larger
index than its parent and each node owns a contiguous range of ``perm``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh


@dataclass(frozen=True)
class BvhParams:
    leaf_size: int = 8
    split: str = "median-longest-axis"

    def __post_init__(self):
        if self.leaf_size < 1:
            raise ValueError("leaf_size must be at least 1")
        if self.split != "median-longest-axis":
            raise ValueError(f"unknown split rule {self.split!r}")


@dataclass(eq=False)
class BvhTree:
    perm: np.ndarray  # faces in tree order
    begin: np.ndarray
    end: np.ndarray
    left: np.ndarray  # -1 for leaves
    right: np.ndarray
    area: np.ndarray
    center: np.ndarray  # area-weighted barycenter
    projector: np.ndarray  # area-weighted mean of N N^T
    radius: np.ndarray  # max distance of member triangle corners from center
    box_min: np.ndarray
    box_max: np.ndarray
    # face data in original face order
    face_center: np.ndarray
    face_normal: np.ndarray
    face_area: np.ndarray
    face_radius: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.begin)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def faces_of(self, node: int) -> np.ndarray:
        return self.perm[self.begin[node] : self.end[node]]

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)


def _split_topology(centers: np.ndarray, leaf_size: int):
    perm = np.arange(len(centers))
    begin, end, left, right = [], [], [], []

    def visit(lo: int, hi: int) -> int:
        node = len(begin)
        begin.append(lo)
        end.append(hi)
        left.append(-1)
        right.append(-1)
        if hi - lo <= leaf_size:
            return node
        pts = centers[perm[lo:hi]]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        mid = (hi - lo) // 2
        order = np.argpartition(pts[:, axis], mid, kind="introselect")
        perm[lo:hi] = perm[lo:hi][order]
        left[node] = visit(lo, lo + mid)
        right[node] = visit(lo + mid, hi)
        return node

    visit(0, len(centers))
    as_int = lambda v: np.array(v, dtype=np.int64)
    return perm, as_int(begin), as_int(end), as_int(left), as_int(right)


def _aggregates(mesh: TriMesh, perm, begin, end):
    a = mesh.face_areas
    X = mesh.barycenters
    N = mesh.face_normals
    P = N[:, :, None] * N[:, None, :]
    c = mesh.corners
    fmin, fmax = c.min(axis=1), c.max(axis=1)
    n = len(begin)
    area = np.empty(n)
    center = np.empty((n, 3))
    proj = np.empty((n, 3, 3))
    radius = np.empty(n)
    bmin = np.empty((n, 3))
    bmax = np.empty((n, 3))
    for k in range(n):
        f = perm[begin[k] : end[k]]
        w = a[f]
        area[k] = w.sum()
        center[k] = w @ X[f] / area[k]
        proj[k] = np.tensordot(w, P[f], axes=1) / area[k]
        radius[k] = np.sqrt(((c[f].reshape(-1, 3) - center[k]) ** 2).sum(axis=1).max())
        bmin[k] = fmin[f].min(axis=0)
        bmax[k] = fmax[f].max(axis=0)
    return area, center, proj, radius, bmin, bmax


def build_bvh(mesh: TriMesh, params: BvhParams = BvhParams()) -> BvhTree:
    perm, begin, end, left, right = _split_topology(mesh.barycenters, params.leaf_size)
    return _assemble(mesh, perm, begin, end, left, right)


def refit_bvh(tree: BvhTree, mesh: TriMesh) -> BvhTree:
    """Recompute aggregates for moved vertices on the existing topology."""
    if len(tree.perm) != mesh.n_faces:
        raise ValueError("mesh connectivity changed; rebuild the tree")
    return _assemble(mesh, tree.perm, tree.begin, tree.end, tree.left, tree.right)


def _assemble(mesh, perm, begin, end, left, right) -> BvhTree:
    area, center, proj, radius, bmin, bmax = _aggregates(mesh, perm, begin, end)
    return BvhTree(
        perm=perm, begin=begin, end=end, left=left, right=right,
        area=area, center=center, projector=proj, radius=radius,
        box_min=bmin, box_max=bmax,
        face_center=np.ascontiguousarray(mesh.barycenters),
        face_normal=np.ascontiguousarray(mesh.face_normals),
        face_area=np.ascontiguousarray(mesh.face_areas),
        face_radius=np.ascontiguousarray(mesh.face_radii),
    )


def point_box_distance(x: np.ndarray, bmin: np.ndarray, bmax: np.ndarray) -> float:
    gap = np.maximum(np.maximum(bmin - x, x - bmax), 0.0)
    return float(np.sqrt(gap @ gap))


def face_admissible(tree: BvhTree, face: int, node: int, theta: float) -> bool:
    """Separation test ``max(r(S), r(I)) <= theta * dist(S, box(I))``.

    ``dist(S, box)`` is the barycenter-to-box distance less ``r(S)``, floored at 0.
    """
    if theta <= 0:
        return False
    rs = tree.face_radius[face]
    dist = point_box_distance(tree.face_center[face], tree.box_min[node], tree.box_max[node]) - rs
    return max(rs, tree.radius[node]) <= theta * max(dist, 0.0)


def bh_front(tree: BvhTree, face: int, theta: float) -> list[tuple[int, bool]]:
    """Barnes-Hut front of ``face`` as ``(node, exact)`` pairs.

    Admissible nodes are returned with ``exact=False``; leaves reached
    without separation are returned with ``exact=True`` and their members
    (other than ``face``) are meant to be summed pairwise.
    """
    if theta < 0:
        raise ValueError("theta must be non-negative")
    out, stack = [], [0]
    while stack:
        node = stack.pop()
        if face_admissible(tree, face, node, theta):
            out.append((node, False))
        elif tree.left[node] < 0:
            out.append((node, True))
        else:
            stack += [tree.right[node], tree.left[node]]
    return out
