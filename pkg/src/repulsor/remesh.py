"""Dynamic remeshing: edge splits and collapses, Delaunay flips, tangential smoothing.

Operations are applied sequentially on a lightweight face list with
vertex-to-face sets; every candidate is re-checked right before it is applied
and skipped if it would break manifoldness or fold a triangle over. Pinned
vertices are never moved, removed or smoothed, and boundary vertices are not
smoothed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import DEGENERATE_AREA, TriMesh

log = logging.getLogger(__name__)

MAX_FLIP_SWEEPS = 100
FLIP_SLACK = 1e-10
SPLIT_FACTOR = 1.5
COLLAPSE_FACTOR = 0.5


@dataclass(frozen=True)
class RemeshParams:
    L0: float
    rho: float = 0.5
    N: int = 5

    def __post_init__(self):
        if not self.L0 > 0:
            raise ValueError("L0 must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.N < 1:
            raise ValueError("N must be at least 1")

    @classmethod
    def for_mesh(cls, mesh: TriMesh, **kw) -> "RemeshParams":
        """Target length set to the mean edge length of ``mesh``."""
        return cls(L0=mean_edge_length(mesh), **kw)


@dataclass
class RemeshStats:
    splits: int = 0
    collapses: int = 0
    flips: int = 0
    flip_sweeps: int = 0
    sweep_cap_hit: bool = False
    smoothing_reverts: int = 0
    rejected: dict = field(default_factory=dict)

    def reject(self, reason: str):
        self.rejected[reason] = self.rejected.get(reason, 0) + 1


def mean_edge_length(mesh: TriMesh) -> float:
    e = mesh.edges
    return float(np.linalg.norm(mesh.positions[e[:, 1]] - mesh.positions[e[:, 0]], axis=1).mean())


def edge_length_fraction(mesh: TriMesh, L0: float) -> float:
    """Fraction of edges with length in ``[L0 / 2, 3 L0 / 2]``."""
    e = mesh.edges
    length = np.linalg.norm(mesh.positions[e[:, 1]] - mesh.positions[e[:, 0]], axis=1)
    return float(np.mean((length >= COLLAPSE_FACTOR * L0) & (length <= SPLIT_FACTOR * L0)))


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


class _Work:
    """Mutable triangle soup with vertex-to-face incidence."""

    def __init__(self, mesh: TriMesh, pinned):
        self.x = [tuple(p) for p in mesh.positions.tolist()]
        self.comp = mesh.component_of.tolist()
        self.F = [list(f) for f in mesh.faces.tolist()]
        self.vf = [set() for _ in self.x]
        for k, f in enumerate(self.F):
            for v in f:
                self.vf[v].add(k)
        self.pinned = set(int(v) for v in pinned)
        self.n0 = len(self.x)

    # -- queries --------------------------------------------------------

    def edge_faces(self, u, v):
        return self.vf[u] & self.vf[v]

    def neighbors(self, u):
        out = set()
        for f in self.vf[u]:
            out.update(self.F[f])
        out.discard(u)
        return out

    def oriented(self, f, u, v):
        """Third vertex of face ``f`` and whether it runs ``u -> v``."""
        a, b, c = self.F[f]
        for p, q, r in ((a, b, c), (b, c, a), (c, a, b)):
            if p == u and q == v:
                return r, True
            if p == v and q == u:
                return r, False
        raise KeyError((f, u, v))

    def on_boundary(self, u):
        return any(len(self.edge_faces(u, w)) == 1 for w in self.neighbors(u))

    def cross_of(self, f, subst=None):
        p = [self.x[v] if subst is None or v not in subst else subst[v] for v in self.F[f]]
        return _cross(_sub(p[1], p[0]), _sub(p[2], p[0]))

    def length(self, u, v):
        return math.sqrt(_dot(*(2 * [_sub(self.x[u], self.x[v])])))

    def edges(self):
        """Undirected edges ``(u, v)`` with ``u < v`` in lexicographic order."""
        out = set()
        for f in self.F:
            if f is None:
                continue
            a, b, c = f
            out.update(((min(a, b), max(a, b)), (min(b, c), max(b, c)), (min(a, c), max(a, c))))
        return sorted(out)

    def live_faces(self):
        return [f for f in self.F if f is not None]

    # -- split ----------------------------------------------------------

    def split(self, u, v):
        m = len(self.x)
        xu, xv = self.x[u], self.x[v]
        self.x.append(((xu[0] + xv[0]) / 2, (xu[1] + xv[1]) / 2, (xu[2] + xv[2]) / 2))
        self.comp.append(self.comp[u])
        self.vf.append(set())
        for f in list(self.edge_faces(u, v)):
            r, forward = self.oriented(f, u, v)
            p, q = (u, v) if forward else (v, u)
            self.F[f] = [p, m, r]
            g = len(self.F)
            self.F.append([m, q, r])
            self.vf[q].discard(f)
            self.vf[q].add(g)
            self.vf[r].add(g)
            self.vf[m].update((f, g))
        return m

    # -- collapse --------------------------------------------------------

    def try_collapse(self, u, v, L0, stats: RemeshStats) -> bool:
        if u in self.pinned or v in self.pinned:
            stats.reject("pinned")
            return False
        shared = self.edge_faces(u, v)
        bu, bv = self.on_boundary(u), self.on_boundary(v)
        boundary_edge = len(shared) == 1
        if boundary_edge:
            target = tuple((a + b) / 2 for a, b in zip(self.x[u], self.x[v]))
        elif bu and bv:
            stats.reject("boundary")
            return False
        elif bv:
            u, v = v, u
            target = self.x[u]
        elif bu:
            target = self.x[u]
        else:
            target = tuple((a + b) / 2 for a, b in zip(self.x[u], self.x[v]))
        # link condition
        opposite = {self.oriented(f, u, v)[0] for f in shared}
        nu, nv = self.neighbors(u), self.neighbors(v)
        if (nu & nv) != opposite:
            stats.reject("link")
            return False
        for w in opposite:
            wb = self.on_boundary(w)
            if boundary_edge and wb:
                stats.reject("link")
                return False
            if len(self.neighbors(w)) - 1 < 3:
                stats.reject("valence")
                return False
        for w in (nu | nv) - {u, v}:
            d = _sub(target, self.x[w])
            if math.sqrt(_dot(d, d)) > SPLIT_FACTOR * L0:
                stats.reject("long edge")
                return False
        subst = {u: target, v: target}
        for f in (self.vf[u] | self.vf[v]) - shared:
            old = self.cross_of(f)
            new = self.cross_of(f, subst)
            if _dot(old, new) <= 0 or 0.5 * math.sqrt(_dot(new, new)) < DEGENERATE_AREA:
                stats.reject("foldover")
                return False
        for f in shared:
            for w in self.F[f]:
                self.vf[w].discard(f)
            self.F[f] = None
        for f in self.vf[v]:
            self.F[f] = [u if w == v else w for w in self.F[f]]
            self.vf[u].add(f)
        self.vf[v] = set()
        self.x[u] = target
        return True

    # -- flip ------------------------------------------------------------

    def try_flip(self, u, v) -> bool:
        shared = list(self.edge_faces(u, v))
        if len(shared) != 2:
            return False
        f1, f2 = shared
        a, fwd = self.oriented(f1, u, v)
        b, _ = self.oriented(f2, u, v)
        if not fwd:
            f1, f2, a, b = f2, f1, b, a
        if _opposite_angle(self.x[u], self.x[v], self.x[a]) + _opposite_angle(self.x[u], self.x[v], self.x[b]) \
                <= math.pi + FLIP_SLACK:
            return False
        if b in self.neighbors(a):
            return False
        n_old = tuple(p + q for p, q in zip(self.cross_of(f1), self.cross_of(f2)))
        new1 = _cross(_sub(self.x[u], self.x[a]), _sub(self.x[b], self.x[a]))
        new2 = _cross(_sub(self.x[v], self.x[b]), _sub(self.x[a], self.x[b]))
        for c in (new1, new2):
            if _dot(c, n_old) <= 0 or 0.5 * math.sqrt(_dot(c, c)) < DEGENERATE_AREA:
                return False
        # f1 = (u, v, a), f2 = (v, u, b)  ->  (a, u, b), (b, v, a)
        self.F[f1] = [a, u, b]
        self.F[f2] = [b, v, a]
        self.vf[v].discard(f1)
        self.vf[u].discard(f2)
        self.vf[b].add(f1)
        self.vf[a].add(f2)
        return True

    def flip_sweeps(self, stats: RemeshStats):
        for sweep in range(MAX_FLIP_SWEEPS):
            stats.flip_sweeps += 1
            flipped = 0
            for u, v in self._flip_candidates():
                if self.try_flip(u, v):
                    flipped += 1
            stats.flips += flipped
            if not flipped:
                return
        stats.sweep_cap_hit = True
        log.info("Delaunay flips stopped at the %d-sweep cap", MAX_FLIP_SWEEPS)

    def _flip_candidates(self):
        """Interior edges whose opposite angles sum past pi, in edge order."""
        F = np.array(self.live_faces(), dtype=np.int64)
        X = np.array(self.x)
        p, q, r = F[:, 0], F[:, 1], F[:, 2]
        u = np.concatenate([p, q, r])
        v = np.concatenate([q, r, p])
        opp = np.concatenate([r, p, q])
        e1 = X[u] - X[opp]
        e2 = X[v] - X[opp]
        ang = np.arctan2(np.linalg.norm(np.cross(e1, e2), axis=1), np.einsum("ij,ij->i", e1, e2))
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        key = lo * len(X) + hi
        uniq, inv = np.unique(key, return_inverse=True)
        total = np.bincount(inv, weights=ang)
        count = np.bincount(inv)
        bad = uniq[(count == 2) & (total > np.pi + FLIP_SLACK)]
        return [(int(k // len(X)), int(k % len(X))) for k in bad]

    # -- smoothing ------------------------------------------------------

    def smooth(self, rho: float, stats: RemeshStats):
        F = np.array(self.live_faces(), dtype=np.int64)
        X = np.array(self.x)
        n = len(X)
        c = X[F]
        ab, ac = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
        cr = np.cross(ab, ac)
        area2 = np.einsum("ij,ij->i", cr, cr)
        cc = c[:, 0] + (np.einsum("ij,ij->i", ac, ac)[:, None] * np.cross(cr, ab)
                        + np.einsum("ij,ij->i", ab, ab)[:, None] * np.cross(ac, cr)) / (2 * area2[:, None])
        area = 0.5 * np.sqrt(area2)
        acc = np.zeros((n, 3))
        wsum = np.zeros(n)
        normal = np.zeros((n, 3))
        for k in range(3):
            np.add.at(acc, F[:, k], area[:, None] * (cc - c[:, k]))
            np.add.at(wsum, F[:, k], area)
            np.add.at(normal, F[:, k], cr)
        live = wsum > 0
        fixed = ~live
        for v in self.pinned:
            fixed[v] = True
        fixed |= self._boundary_mask(F, n)
        disp = np.zeros((n, 3))
        disp[live] = rho * acc[live] / wsum[live, None]
        nrm = normal / np.maximum(np.linalg.norm(normal, axis=1), 1e-300)[:, None]
        disp -= np.einsum("ij,ij->i", disp, nrm)[:, None] * nrm
        disp[fixed] = 0.0
        new = X + disp
        # revert vertices of faces that would fold over, until none do
        for _ in range(50):
            c2 = new[F]
            cr2 = np.cross(c2[:, 1] - c2[:, 0], c2[:, 2] - c2[:, 0])
            bad = (np.einsum("ij,ij->i", cr, cr2) <= 0) | (0.5 * np.linalg.norm(cr2, axis=1) < DEGENERATE_AREA)
            if not bad.any():
                break
            verts = np.unique(F[bad])
            moved = verts[np.any(new[verts] != X[verts], axis=1)]
            if not len(moved):
                break
            stats.smoothing_reverts += len(moved)
            new[moved] = X[moved]
        self.x = [tuple(p) for p in new.tolist()]

    @staticmethod
    def _boundary_mask(F, n):
        u = np.concatenate([F[:, 0], F[:, 1], F[:, 2]])
        v = np.concatenate([F[:, 1], F[:, 2], F[:, 0]])
        key = np.minimum(u, v) * n + np.maximum(u, v)
        uniq, count = np.unique(key, return_counts=True)
        mask = np.zeros(n, dtype=bool)
        b = uniq[count == 1]
        mask[b // n] = True
        mask[b % n] = True
        return mask

    # -- output ----------------------------------------------------------

    def compact(self):
        alive = np.array([len(s) > 0 for s in self.vf])
        new_index = np.full(len(self.x), -1, dtype=np.int64)
        new_index[alive] = np.arange(alive.sum())
        X = np.array(self.x)[alive]
        F = new_index[np.array(self.live_faces(), dtype=np.int64)]
        comp = np.array(self.comp)[alive]
        return TriMesh(X, F, comp), new_index[: self.n0]


def _opposite_angle(xu, xv, xa):
    e1, e2 = _sub(xu, xa), _sub(xv, xa)
    c = _cross(e1, e2)
    return math.atan2(math.sqrt(_dot(c, c)), _dot(e1, e2))


def remesh_pass(mesh: TriMesh, params: RemeshParams, pinned=()) -> tuple[TriMesh, np.ndarray, RemeshStats]:
    """One remeshing pass.

    Splits edges longer than ``3 L0 / 2`` (longest first), collapses edges
    shorter than ``L0 / 2`` (shortest first) to their midpoint, restores the
    Delaunay condition by flips, then runs ``N`` rounds of tangential
    circumcentric smoothing, each followed by flip sweeps.

    Returns the new mesh, a map from old vertex ids to new ones (``-1`` for
    removed vertices) and counters.
    """
    work = _Work(mesh, pinned)
    stats = RemeshStats()
    L0 = params.L0

    for _ in range(8):
        edges = [(work.length(u, v), u, v) for u, v in work.edges()]
        long = sorted((e for e in edges if e[0] > SPLIT_FACTOR * L0), key=lambda e: (-e[0], e[1], e[2]))
        done = 0
        for _, u, v in long:
            if work.edge_faces(u, v) and work.length(u, v) > SPLIT_FACTOR * L0:
                work.split(u, v)
                done += 1
        stats.splits += done
        if not done:
            break

    edges = [(work.length(u, v), u, v) for u, v in work.edges()]
    for _, u, v in sorted(e for e in edges if e[0] < COLLAPSE_FACTOR * L0):
        if work.vf[u] and work.vf[v] and work.edge_faces(u, v) and work.length(u, v) < COLLAPSE_FACTOR * L0:
            if work.try_collapse(u, v, L0, stats):
                stats.collapses += 1

    work.flip_sweeps(stats)
    for _ in range(params.N):
        work.smooth(params.rho, stats)
        work.flip_sweeps(stats)

    out, vmap = work.compact()
    log.debug("remesh: %d splits, %d collapses, %d flips", stats.splits, stats.collapses, stats.flips)
    return out, vmap, stats
