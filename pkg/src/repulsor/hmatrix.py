"""Block cluster tree, rank-1 hierarchical kernel products and the fractional operators.

The kernel matrices ``H`` live on faces. Products are split into an exact
near field (inadmissible leaf blocks, stored as one sparse matrix) and a
far field where each admissible block ``(I, J)`` contributes
``1_I h(X_I, P_I; X_J, P_J) 1_J^T``. Because every cluster owns a contiguous
range of the tree ordering, the upward pass ``x~_J = 1_J^T x_J`` is a
difference of prefix sums and the downward pass is a difference-array scatter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .bvh import BvhTree
from .mesh import TriMesh

log = logging.getLogger(__name__)

TAGS = ("Lsigma", "HighOrder", "LowOrder")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel ``h`` of a fractional operator.

    ``order`` is sigma for ``Lsigma`` and s for the high/low-order kernels.
    The high-order kernel is ``|X - Y|^-(2 s)``, i.e. ``Lsigma`` with
    ``sigma = s - 1``; the low-order kernel multiplies it by the symmetrized
    ``k_2`` tangent-point kernel.
    """

    tag: str
    order: float

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown kernel tag {self.tag!r}")
        if self.order <= 0:
            raise ValueError("kernel order must be positive")

    @classmethod
    def lsigma(cls, sigma: float) -> "KernelSpec":
        return cls("Lsigma", sigma)

    @classmethod
    def high(cls, p: float) -> "KernelSpec":
        return cls("HighOrder", 2.0 - 2.0 / p)

    @classmethod
    def low(cls, p: float) -> "KernelSpec":
        return cls("LowOrder", 2.0 - 2.0 / p)

    @property
    def exponent(self) -> float:
        """Power of ``|X - Y|`` in the denominator."""
        if self.tag == "Lsigma":
            return 2.0 * self.order + 2.0
        return 2.0 * self.order


def kernel_value(spec: KernelSpec, X, P, Y, Q) -> float:
    d = np.asarray(X, dtype=float) - np.asarray(Y, dtype=float)
    r2 = float(d @ d)
    if r2 < 1e-28:
        raise ValueError("kernel evaluated at coincident centers")
    base = r2 ** (-0.5 * spec.exponent)
    if spec.tag != "LowOrder":
        return base
    pd = np.asarray(P) @ d
    qd = np.asarray(Q) @ d
    return 0.5 * (pd @ pd + qd @ qd) / r2**2 * base


def _kernel_normals(spec: KernelSpec, X, N, Y, M):
    """Vectorized ``h`` for face pairs with projectors ``N N^T`` and ``M M^T``."""
    d = X - Y
    r2 = np.einsum("ij,ij->i", d, d)
    base = r2 ** (-0.5 * spec.exponent)
    if spec.tag != "LowOrder":
        return base
    qs = np.einsum("ij,ij->i", N, d)
    qt = np.einsum("ij,ij->i", M, d)
    return 0.5 * (qs * qs + qt * qt) / r2**2 * base


def _kernel_projectors(spec: KernelSpec, X, P, Y, Q):
    d = X - Y
    r2 = np.einsum("ij,ij->i", d, d)
    base = r2 ** (-0.5 * spec.exponent)
    if spec.tag != "LowOrder":
        return base
    pd = np.einsum("ijk,ik->ij", P, d)
    qd = np.einsum("ijk,ik->ij", Q, d)
    return 0.5 * (np.einsum("ij,ij->i", pd, pd) + np.einsum("ij,ij->i", qd, qd)) / r2**2 * base


# -- block cluster tree -------------------------------------------------------


@njit(cache=True)
def _box_gap(amin, amax, bmin, bmax):
    s = 0.0
    for k in range(3):
        g = max(bmin[k] - amax[k], amin[k] - bmax[k], 0.0)
        s += g * g
    return np.sqrt(s)


@njit(cache=True)
def _grow(a, n):
    out = np.empty(max(2 * a.shape[0], n), dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _split_blocks(left, right, radius, bmin, bmax, chi):
    adm_i = np.empty(64, dtype=np.int64)
    adm_j = np.empty(64, dtype=np.int64)
    near_i = np.empty(64, dtype=np.int64)
    near_j = np.empty(64, dtype=np.int64)
    n_adm = 0
    n_near = 0
    stack = np.empty((64, 2), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    top = 1
    while top > 0:
        top -= 1
        I = stack[top, 0]
        J = stack[top, 1]
        separated = False
        if chi > 0.0:
            dist = _box_gap(bmin[I], bmax[I], bmin[J], bmax[J])
            separated = dist > 0.0 and max(radius[I], radius[J]) <= chi * dist
        if separated:
            if n_adm == adm_i.shape[0]:
                adm_i = _grow(adm_i, n_adm + 1)
                adm_j = _grow(adm_j, n_adm + 1)
            adm_i[n_adm] = I
            adm_j[n_adm] = J
            n_adm += 1
            continue
        leaf_i = left[I] < 0
        leaf_j = left[J] < 0
        if leaf_i and leaf_j:
            if n_near == near_i.shape[0]:
                near_i = _grow(near_i, n_near + 1)
                near_j = _grow(near_j, n_near + 1)
            near_i[n_near] = I
            near_j[n_near] = J
            n_near += 1
            continue
        if top + 4 > stack.shape[0]:
            grown = np.empty((2 * stack.shape[0], 2), dtype=np.int64)
            grown[:top] = stack[:top]
            stack = grown
        if leaf_i:
            stack[top, 0] = I
            stack[top, 1] = left[J]
            stack[top + 1, 0] = I
            stack[top + 1, 1] = right[J]
            top += 2
        elif leaf_j:
            stack[top, 0] = left[I]
            stack[top, 1] = J
            stack[top + 1, 0] = right[I]
            stack[top + 1, 1] = J
            top += 2
        else:
            for a in (left[I], right[I]):
                for b in (left[J], right[J]):
                    stack[top, 0] = a
                    stack[top, 1] = b
                    top += 1
    return adm_i[:n_adm].copy(), adm_j[:n_adm].copy(), near_i[:n_near].copy(), near_j[:n_near].copy()


@njit(cache=True)
def _near_pairs(begin, end, near_i, near_j):
    """Tree-order positions of all face pairs in inadmissible blocks, diagonal excluded."""
    count = 0
    for b in range(near_i.shape[0]):
        I, J = near_i[b], near_j[b]
        count += (end[I] - begin[I]) * (end[J] - begin[J])
        if I == J:
            count -= end[I] - begin[I]
    rows = np.empty(count, dtype=np.int64)
    cols = np.empty(count, dtype=np.int64)
    k = 0
    for b in range(near_i.shape[0]):
        I, J = near_i[b], near_j[b]
        for s in range(begin[I], end[I]):
            for t in range(begin[J], end[J]):
                if s != t:
                    rows[k] = s
                    cols[k] = t
                    k += 1
    return rows, cols


@dataclass(eq=False)
class BlockClusterTree:
    tree: BvhTree
    chi: float
    admissible: np.ndarray  # (n, 2) cluster pairs
    inadmissible: np.ndarray  # (m, 2) leaf cluster pairs
    near_rows: np.ndarray = field(repr=False)  # tree-order positions
    near_cols: np.ndarray = field(repr=False)

    @property
    def n_faces(self) -> int:
        return len(self.tree.perm)

    def block_sizes(self) -> int:
        """Sum of ``|I| |J|`` over all leaf blocks; equals ``|F|^2``."""
        size = self.tree.end - self.tree.begin
        blocks = np.vstack([self.admissible, self.inadmissible])
        return int((size[blocks[:, 0]] * size[blocks[:, 1]]).sum())


def build_bct(tree: BvhTree, chi: float = 0.5) -> BlockClusterTree:
    """Split ``(root, root)`` until every block is separated or a leaf pair.

    ``(I, J)`` is separated when ``max(r(I), r(J)) <= chi * dist(box I, box J)``
    with a strictly positive box distance, so ``chi = 0`` keeps everything exact.
    """
    if chi < 0:
        raise ValueError("chi must be non-negative")
    ai, aj, ni, nj = _split_blocks(tree.left, tree.right, tree.radius, tree.box_min, tree.box_max, float(chi))
    rows, cols = _near_pairs(tree.begin, tree.end, ni, nj)
    return BlockClusterTree(
        tree=tree, chi=float(chi),
        admissible=np.stack([ai, aj], axis=1), inadmissible=np.stack([ni, nj], axis=1),
        near_rows=rows, near_cols=cols,
    )


# -- hierarchical kernel matrix ----------------------------------------------


@dataclass(eq=False)
class HMatrix:
    """Compressed kernel matrix over faces (original face order at the interface)."""

    perm: np.ndarray
    begin: np.ndarray
    end: np.ndarray
    near: sp.csr_matrix  # tree order
    far: sp.csr_matrix  # cluster x cluster, admissible blocks only
    far_nodes: np.ndarray  # clusters that appear in some admissible block

    @classmethod
    def build(cls, bct: BlockClusterTree, spec: KernelSpec) -> "HMatrix":
        t = bct.tree
        m = bct.n_faces
        X = t.face_center[t.perm]
        N = t.face_normal[t.perm]
        r, c = bct.near_rows, bct.near_cols
        vals = _kernel_normals(spec, X[r], N[r], X[c], N[c]) if len(r) else np.zeros(0)
        near = sp.csr_matrix((vals, (r, c)), shape=(m, m))
        adm = bct.admissible
        nodes = np.unique(adm) if len(adm) else np.zeros(0, dtype=np.int64)
        local = np.full(t.n_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        if len(adm):
            I, J = adm[:, 0], adm[:, 1]
            fv = _kernel_projectors(spec, t.center[I], t.projector[I], t.center[J], t.projector[J])
            far = sp.csr_matrix((fv, (local[I], local[J])), shape=(len(nodes), len(nodes)))
        else:
            far = sp.csr_matrix((0, 0))
        return cls(t.perm, t.begin, t.end, near, far, nodes)

    @property
    def shape(self):
        return self.near.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``H x`` for ``x`` of shape ``(|F|,)`` or ``(|F|, k)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.near.shape[1]:
            raise ValueError(f"expected {self.near.shape[1]} rows, got {x.shape[0]}")
        xt = x[self.perm]
        yt = self.near @ xt
        if len(self.far_nodes):
            # upward pass: cluster sums from prefix sums of the tree-ordered input
            cs = np.concatenate([np.zeros((1,) + xt.shape[1:]), np.cumsum(xt, axis=0)])
            b, e = self.begin[self.far_nodes], self.end[self.far_nodes]
            xc = cs[e] - cs[b]
            yc = self.far @ xc
            # downward pass: add each cluster value to its member range
            diff = np.zeros((len(xt) + 1,) + xt.shape[1:])
            np.add.at(diff, b, yc)
            np.subtract.at(diff, e, yc)
            yt += np.cumsum(diff[:-1], axis=0)
        y = np.empty_like(yt)
        y[self.perm] = yt
        return y


def hmat_apply(bct: BlockClusterTree, spec: KernelSpec, x: np.ndarray) -> np.ndarray:
    """One-off hierarchical product; build an :class:`HMatrix` to reuse the compression."""
    return HMatrix.build(bct, spec).matvec(x)


def dense_kernel_matrix(mesh: TriMesh, spec: KernelSpec) -> np.ndarray:
    """Exact ``H`` with zero diagonal (oracle for small meshes)."""
    X, N = mesh.barycenters, mesh.face_normals
    m = len(X)
    i, j = np.divmod(np.arange(m * m), m)
    off = i != j
    H = np.zeros(m * m)
    H[off] = _kernel_normals(spec, X[i[off]], N[i[off]], X[j[off]], N[j[off]])
    return H.reshape(m, m)


# -- averaging and derivative operators --------------------------------------


def averaging_operator(mesh: TriMesh) -> sp.csr_matrix:
    """``U``: vertex values to face averages times face area (``U 1 = a``)."""
    m = mesh.n_faces
    a = mesh.face_areas
    rows = np.repeat(np.arange(m), 3)
    return sp.csr_matrix((np.repeat(a / 3.0, 3), (rows, mesh.faces.ravel())), shape=(m, mesh.n_vertices))


def hat_gradients(mesh: TriMesh) -> np.ndarray:
    """``(|F|, 3, 3)``: gradient of the hat function of each face corner, ``N x (x_k - x_j) / 2a``."""
    c = mesh.corners
    n = mesh.face_normals
    twice = 2.0 * mesh.face_areas[:, None]
    out = np.empty_like(c)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        out[:, k] = np.cross(n, c[:, l] - c[:, j]) / twice
    return out


def derivative_operators(mesh: TriMesh) -> list[sp.csr_matrix]:
    """``D_f`` split by gradient component: three ``|F| x |V|`` matrices."""
    g = hat_gradients(mesh)
    m = mesh.n_faces
    rows = np.repeat(np.arange(m), 3)
    cols = mesh.faces.ravel()
    return [sp.csr_matrix((g[:, :, c].ravel(), (rows, cols)), shape=(m, mesh.n_vertices)) for c in range(3)]


# -- fractional operators ----------------------------------------------------


@dataclass(eq=False)
class FractionalStack:
    """Per-step operator data: ``U``, ``V = diag(a) D_f``, and the compressed kernels.

    ``low_order_factor`` selects the sparse factor around the low-order kernel
    matrix: ``"U"`` (function differences, the default) or ``"V"`` (derivative
    differences).
    """

    mesh: TriMesh
    bct: BlockClusterTree
    p: float = 6.0
    sigma: float | None = None  # preconditioner order, default 2 - s
    low_order_factor: str = "U"
    U: sp.csr_matrix = field(init=False, repr=False)
    V: list = field(init=False, repr=False)
    _kernels: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        if self.low_order_factor not in ("U", "V"):
            raise ValueError("low_order_factor must be 'U' or 'V'")
        if self.sigma is None:
            self.sigma = 2.0 - self.s
        a = self.mesh.face_areas
        self.U = averaging_operator(self.mesh)
        self.V = [sp.csr_matrix(sp.diags(a) @ D) for D in derivative_operators(self.mesh)]

    @property
    def s(self) -> float:
        return 2.0 - 2.0 / self.p

    def spec(self, tag: str) -> KernelSpec:
        return KernelSpec(tag, self.sigma if tag == "Lsigma" else self.s)

    def kernel(self, tag: str):
        """``(HMatrix, diag(a)^-1 H a)`` for a kernel tag, built on first use."""
        if tag not in self._kernels:
            H = HMatrix.build(self.bct, self.spec(tag))
            a = self.mesh.face_areas
            self._kernels[tag] = (H, H.matvec(a) / a)
        return self._kernels[tag]

    def _sandwich(self, tag: str, factors, v):
        H, d = self.kernel(tag)
        cols = [F @ v for F in factors]
        w = np.concatenate([c.reshape(len(d), -1) for c in cols], axis=1)
        z = d[:, None] * w - H.matvec(w)
        k = w.shape[1] // len(factors)
        out = sum(F.T @ z[:, i * k : (i + 1) * k] for i, F in enumerate(factors))
        return 2.0 * out.reshape(v.shape)

    def apply(self, which: str, v: np.ndarray, low_order: bool = True) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if which == "Lsigma":
            return self._sandwich("Lsigma", [self.U], v)
        if which == "B":
            return self._sandwich("HighOrder", self.V, v)
        if which == "B0":
            return self._sandwich("LowOrder", [self.U] if self.low_order_factor == "U" else self.V, v)
        if which == "A":
            out = self.apply("B", v)
            return out + self.apply("B0", v) if low_order else out
        if which == "A3":
            n = self.mesh.n_vertices
            if v.size != 3 * n:
                raise ValueError(f"A3 expects {3 * n} entries, got {v.size}")
            return self.apply("A", v.reshape(n, 3), low_order).reshape(v.shape)
        raise ValueError(f"unknown operator {which!r}")


def apply_fractional(stack: FractionalStack, which: str, v: np.ndarray, low_order: bool = True) -> np.ndarray:
    """Action of ``Lsigma``, ``B``, ``B0``, ``A = B + B0`` or ``A3`` (``A`` per coordinate).

    Uses ``2 F^T [diag(diag(a)^-1 H a) - H] F v`` with ``F = U`` or ``F = V``.
    """
    return stack.apply(which, v, low_order)


# -- dense assembly oracle ---------------------------------------------------


@njit(cache=True)
def _assemble_pairs(faces, X, N, a, grads, exponent, mode, n_vertices):
    # mode 0: averaged hat functions, 1: hat gradients, 2: averaged hats with k_2 weight
    m = faces.shape[0]
    L = np.zeros((n_vertices, n_vertices))
    verts = np.empty(6, dtype=np.int64)
    fs = np.zeros(6)
    ft = np.zeros(6)
    gs = np.zeros((6, 3))
    gt = np.zeros((6, 3))
    for S in range(m):
        for T in range(m):
            if S == T:
                continue
            r2 = 0.0
            q = 0.0
            for k in range(3):
                dk = X[S, k] - X[T, k]
                r2 += dk * dk
                q += N[S, k] * dk
            w = a[S] * a[T] * r2 ** (-0.5 * exponent)
            if mode == 2:
                w *= q * q / (r2 * r2)
            # union of the two corner sets
            nv = 0
            for c in range(3):
                verts[nv] = faces[S, c]
                nv += 1
            for c in range(3):
                v = faces[T, c]
                dup = False
                for u in range(3):
                    if verts[u] == v:
                        dup = True
                if not dup:
                    verts[nv] = v
                    nv += 1
            for u in range(nv):
                fs[u] = 0.0
                ft[u] = 0.0
                for k in range(3):
                    gs[u, k] = 0.0
                    gt[u, k] = 0.0
                for c in range(3):
                    if faces[S, c] == verts[u]:
                        fs[u] = 1.0 / 3.0
                        for k in range(3):
                            gs[u, k] = grads[S, c, k]
                    if faces[T, c] == verts[u]:
                        ft[u] = 1.0 / 3.0
                        for k in range(3):
                            gt[u, k] = grads[T, c, k]
            for u in range(nv):
                for v in range(nv):
                    if mode == 1:
                        val = 0.0
                        for k in range(3):
                            val += (gs[u, k] - gt[u, k]) * (gs[v, k] - gt[v, k])
                    else:
                        val = (fs[u] - ft[u]) * (fs[v] - ft[v])
                    L[verts[u], verts[v]] += val * w
    return L


def assemble_dense_fractional(mesh: TriMesh, spec: KernelSpec, max_faces: int = 2000) -> np.ndarray:
    """Exact ``|V| x |V|`` matrix by the pairwise assembly loop (test oracle).

    ``Lsigma`` gives ``L^sigma``, ``HighOrder`` gives ``B`` and ``LowOrder`` gives ``B0``.
    """
    if mesh.n_faces > max_faces:
        raise ValueError(f"dense assembly capped at {max_faces} faces, mesh has {mesh.n_faces}")
    mode = TAGS.index(spec.tag)
    return _assemble_pairs(
        np.ascontiguousarray(mesh.faces), mesh.barycenters, mesh.face_normals, mesh.face_areas,
        np.ascontiguousarray(hat_gradients(mesh)), float(spec.exponent), mode, mesh.n_vertices,
    )
