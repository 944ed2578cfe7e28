"""Barnes-Hut approximation of the tangent-point energy and its differential."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .bvh import BvhTree
from .mesh import TriMesh
from .tpe import COINCIDENT, EnergyParams, pullback_face_gradients


@dataclass(frozen=True)
class BhParams:
    """``theta`` trades accuracy for speed; ``theta = 0`` is the exact all-pairs sum.

    With ``differentiate_aggregates`` the far-field reverse terms are pushed to
    the member faces through the cluster area and barycenter, which makes the
    differential the exact gradient of :func:`bh_energy` (the default). With it
    off the aggregates are frozen constants, which is cheaper but much less
    accurate.
    """

    theta: float = 0.5
    differentiate_aggregates: bool = True

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be non-negative")


@njit(cache=True, inline="always")
def _box_dist(x, bmin, bmax):
    s = 0.0
    for k in range(3):
        g = max(bmin[k] - x[k], x[k] - bmax[k], 0.0)
        s += g * g
    return np.sqrt(s)


@njit(cache=True)
def _traverse(left, right, area, center, radius, bmin, bmax, perm, begin, end,
              fX, fN, fa, fr, theta, p, grad, agg,
              face_energy, gX, gN, ga, nX, na, mode, dec, slack, stale):
    # mode 0 tests admissibility, 1 also records each decision in ``dec``,
    # 2 replays the decisions stored in ``dec`` (same fronts, moved geometry)
    m = fX.shape[0]
    stack = np.empty(256, dtype=np.int64)
    d = np.empty(3)
    count = 0
    for S in range(m):
        XS = fX[S]
        NS = fN[S]
        aS = fa[S]
        rS = fr[S]
        acc = 0.0
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            admissible = False
            if mode == 2:
                admissible = dec[count] != 0
                if admissible and slack > 0.0:
                    # a replayed far pair must still be separated at the relaxed theta
                    dist = _box_dist(XS, bmin[node], bmax[node]) - rS
                    if not (dist > 0.0 and max(rS, radius[node]) <= slack * theta * dist):
                        stale[0] += 1
            elif theta > 0.0:
                dist = _box_dist(XS, bmin[node], bmax[node]) - rS
                if dist > 0.0 and max(rS, radius[node]) <= theta * dist:
                    admissible = True
            if mode == 1:
                if count >= dec.shape[0]:
                    grown = np.zeros(2 * dec.shape[0], dtype=np.int8)
                    grown[:count] = dec[:count]
                    dec = grown
                dec[count] = 1 if admissible else 0
            count += 1
            if admissible:
                aI = area[node]
                r2 = 0.0
                q = 0.0
                for k in range(3):
                    d[k] = XS[k] - center[node, k]
                    r2 += d[k] * d[k]
                    q += NS[k] * d[k]
                aq = abs(q)
                K = aq**p / r2**p
                acc += K * aS * aI
                if grad:
                    w = aS * aI
                    cn = 0.0
                    if aq > 0.0:
                        cn = w * p * np.sign(q) * aq ** (p - 1.0) / r2**p
                    cd = -2.0 * p * w * K / r2
                    for k in range(3):
                        dk = cn * NS[k] + cd * d[k]
                        gX[S, k] += dk
                        gN[S, k] += cn * d[k]
                        if agg:
                            nX[node, k] -= dk
                    ga[S] += K * aI
                    if agg:
                        na[node] += K * aS
            elif left[node] < 0:
                for idx in range(begin[node], end[node]):
                    T = perm[idx]
                    if T == S:
                        continue
                    aT = fa[T]
                    r2 = 0.0
                    q = 0.0
                    for k in range(3):
                        d[k] = XS[k] - fX[T, k]
                        r2 += d[k] * d[k]
                        q += NS[k] * d[k]
                    if r2 < 1e-28:
                        raise ValueError("coincident face barycenters")
                    aq = abs(q)
                    K = aq**p / r2**p
                    acc += K * aS * aT
                    if grad:
                        w = aS * aT
                        cn = 0.0
                        if aq > 0.0:
                            cn = w * p * np.sign(q) * aq ** (p - 1.0) / r2**p
                        cd = -2.0 * p * w * K / r2
                        for k in range(3):
                            dk = cn * NS[k] + cd * d[k]
                            gX[S, k] += dk
                            gX[T, k] -= dk
                            gN[S, k] += cn * d[k]
                        ga[S] += K * aT
                        ga[T] += K * aS
            else:
                if top + 2 > stack.shape[0]:
                    grown = np.empty(2 * stack.shape[0], dtype=np.int64)
                    grown[:top] = stack[:top]
                    stack = grown
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
        face_energy[S] = acc
    return dec[:count].copy() if mode == 1 else dec


@njit(cache=True)
def _push_aggregates(perm, begin, end, area, center, fX, fa, nX, na, gX, ga):
    for node in range(begin.shape[0]):
        if na[node] == 0.0 and nX[node, 0] == 0.0 and nX[node, 1] == 0.0 and nX[node, 2] == 0.0:
            continue
        aI = area[node]
        for idx in range(begin[node], end[node]):
            T = perm[idx]
            s = 0.0
            for k in range(3):
                gX[T, k] += fa[T] / aI * nX[node, k]
                s += (fX[T, k] - center[node, k]) * nX[node, k]
            ga[T] += na[node] + s / aI


@dataclass(eq=False)
class BhFronts:
    """Recorded admissibility decisions of one traversal, replayable on the
    same tree topology after the vertices move."""

    decisions: np.ndarray
    n_nodes: int
    n_faces: int


class StaleFrontsError(ValueError):
    """Replayed fronts no longer satisfy the (relaxed) separation test."""


def _run(tree: BvhTree, params: EnergyParams, bh: BhParams, grad: bool,
         fronts: BhFronts | None = None, record: bool = False, slack: float = 0.0):
    m = len(tree.face_area)
    if fronts is not None:
        if (fronts.n_nodes, fronts.n_faces) != (tree.n_nodes, m):
            raise ValueError("fronts were recorded on a different tree")
        mode, dec = 2, fronts.decisions
    elif record:
        mode, dec = 1, np.zeros(64 * m + 64, dtype=np.int8)
    else:
        mode, dec = 0, np.zeros(1, dtype=np.int8)
    face_energy = np.zeros(m)
    gX = np.zeros((m, 3))
    gN = np.zeros((m, 3))
    ga = np.zeros(m)
    agg = grad and bh.differentiate_aggregates
    nX = np.zeros((tree.n_nodes, 3))
    na = np.zeros(tree.n_nodes)
    stale = np.zeros(1, dtype=np.int64)
    dec = _traverse(
        tree.left, tree.right, tree.area, tree.center, tree.radius, tree.box_min, tree.box_max,
        tree.perm, tree.begin, tree.end,
        tree.face_center, tree.face_normal, tree.face_area, tree.face_radius,
        float(bh.theta), float(params.p), grad, agg,
        face_energy, gX, gN, ga, nX, na, mode, dec, float(slack), stale,
    )
    if stale[0]:
        raise StaleFrontsError(f"{stale[0]} replayed far-field pairs are no longer separated")
    if agg:
        _push_aggregates(tree.perm, tree.begin, tree.end, tree.area, tree.center,
                         tree.face_center, tree.face_area, nX, na, gX, ga)
    recorded = BhFronts(dec, tree.n_nodes, m) if mode == 1 else None
    return float(face_energy.sum()), gX, gN, ga, recorded


def bh_energy(mesh: TriMesh, tree: BvhTree, params: EnergyParams = EnergyParams(),
              bh: BhParams = BhParams(), fronts: BhFronts | None = None, slack: float = 0.0) -> float:
    """Barnes-Hut energy.

    With ``fronts`` the recorded interaction lists are reused instead of
    re-testing admissibility, so the value is smooth in the positions
    (``tree`` must share the recording tree's topology, e.g. via
    :func:`repulsor.bvh.refit_bvh`). With ``slack > 0`` every replayed far
    pair must still pass the separation test at ``slack * theta``, otherwise
    :class:`StaleFrontsError` is raised.
    """
    return _run(tree, params, bh, grad=False, fronts=fronts, slack=slack)[0]


def bh_energy_and_differential(mesh: TriMesh, tree: BvhTree, params: EnergyParams = EnergyParams(),
                               bh: BhParams = BhParams(), fronts: BhFronts | None = None,
                               record: bool = False):
    """Energy and differential from a single traversal (one front per face).

    With ``record=True`` a third value, the :class:`BhFronts` of this
    traversal, is returned.
    """
    energy, gX, gN, ga, recorded = _run(tree, params, bh, grad=True, fronts=fronts, record=record)
    diff = pullback_face_gradients(mesh, gX, gN, ga)
    return (energy, diff, recorded) if record else (energy, diff)


def bh_differential(mesh: TriMesh, tree: BvhTree, params: EnergyParams = EnergyParams(),
                    bh: BhParams = BhParams()) -> np.ndarray:
    return bh_energy_and_differential(mesh, tree, params, bh)[1]


# -- point potentials (static mesh obstacles) --------------------------------


@njit(cache=True)
def _point_potential(left, right, area, center, radius, bmin, bmax, perm, begin, end,
                     fX, fa, points, theta, p, values, grads):
    stack = np.empty(256, dtype=np.int64)
    d = np.empty(3)
    for i in range(points.shape[0]):
        x = points[i]
        acc = 0.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            admissible = False
            if theta > 0.0:
                dist = _box_dist(x, bmin[node], bmax[node])
                if dist > 0.0 and radius[node] <= theta * dist:
                    admissible = True
            if admissible or left[node] < 0:
                if admissible:
                    lo = 0
                    hi = 1
                else:
                    lo = begin[node]
                    hi = end[node]
                for idx in range(lo, hi):
                    if admissible:
                        y = center[node]
                        a = area[node]
                    else:
                        y = fX[perm[idx]]
                        a = fa[perm[idx]]
                    r2 = 0.0
                    for k in range(3):
                        d[k] = x[k] - y[k]
                        r2 += d[k] * d[k]
                    v = a * r2 ** (-0.5 * p)
                    acc += v
                    c = -p * v / r2
                    g0 += c * d[0]
                    g1 += c * d[1]
                    g2 += c * d[2]
            else:
                if top + 2 > stack.shape[0]:
                    grown = np.empty(2 * stack.shape[0], dtype=np.int64)
                    grown[:top] = stack[:top]
                    stack = grown
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
        values[i] = acc
        grads[i, 0] = g0
        grads[i, 1] = g1
        grads[i, 2] = g2


def bh_point_potential(tree: BvhTree, points: np.ndarray, p: float, theta: float = 0.5):
    """``sum_S |X_S - x|^-p a_S`` over the tree's faces and its gradient in ``x``."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    values = np.empty(len(points))
    grads = np.empty((len(points), 3))
    _point_potential(tree.left, tree.right, tree.area, tree.center, tree.radius,
                     tree.box_min, tree.box_max, tree.perm, tree.begin, tree.end,
                     tree.face_center, tree.face_area, points, float(theta), float(p), values, grads)
    return values, grads
