"""
The FMM operators and their precomputed matrices.

Expansions are densities on equivalent surfaces: a node's multipole is a set of
``n_e`` fictitious charges on its upward equivalent surface, its local
expansion a set of charges on its downward equivalent surface. All dense
matrices are built once at ``REFERENCE_LEVEL`` and reused on every level via
Laplace homogeneity:

* kernel matrices between same-shaped surfaces scale by ``2 ** (l - 2)``,
* their pseudo-inverses by ``2 ** (2 - l)``,
* so M2M, L2L and (kernel * pseudo-inverse) M2L products are level invariant.

Every operator accumulates (``+=``) into slices owned by one target node, and
is parallel over targets.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .kernel import INV_4PI, kernel_matrix, laplace_scale
from .surface import n_surface, surface_grid

REFERENCE_LEVEL = 2
FORMAT_VERSION = 1


class PrecomputeError(RuntimeError):
    """An operator matrix could not be built to tolerance."""


class CacheConsistencyError(RuntimeError):
    """A V-list transfer vector has no precomputed M2L matrix."""


def transfer_vectors():
    """The 316 same-level offsets in ``[-3, 3]^3`` with Chebyshev norm >= 2."""
    r = np.arange(-3, 4)
    tv = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return tv[np.abs(tv).max(axis=1) >= 2].astype(np.int64)


def pinv_scale(level):
    return 1.0 / laplace_scale(level, REFERENCE_LEVEL)


def truncated_pinv(matrix, cutoff, name):
    """Pseudo-inverse dropping singular values below ``cutoff * s_max``."""
    if not np.all(np.isfinite(matrix)):
        raise PrecomputeError(f"{name}: matrix has non-finite entries")
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    if s[0] <= 0 or not np.isfinite(s[0]):
        raise PrecomputeError(f"{name}: matrix is numerically zero")
    keep = s >= cutoff * s[0]
    if keep.sum() < 1:
        raise PrecomputeError(f"{name}: no singular value survives cutoff {cutoff}")
    out = (vt[keep].T / s[keep]) @ u[:, keep].T
    if not np.all(np.isfinite(out)):
        raise PrecomputeError(f"{name}: pseudo-inverse has non-finite entries")
    return np.ascontiguousarray(out)


def fingerprint(p, p_check, alpha_inner, alpha_outer, svd_cutoff, side, kernel="laplace"):
    payload = json.dumps(
        {"format": FORMAT_VERSION, "kernel": kernel, "p": int(p), "p_check": int(p_check),
         "alpha_inner": float(alpha_inner), "alpha_outer": float(alpha_outer),
         "svd_cutoff": float(svd_cutoff), "side": float(side),
         "reference_level": REFERENCE_LEVEL},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class OperatorCache:
    """Precomputed operator matrices at ``REFERENCE_LEVEL`` for one configuration."""

    p: int
    p_check: int
    alpha_inner: float
    alpha_outer: float
    svd_cutoff: float
    side: float
    uc2e_inv: np.ndarray
    dc2e_inv: np.ndarray
    m2m: np.ndarray
    l2l: np.ndarray
    m2l: np.ndarray
    transfer_vectors: np.ndarray
    reference_level: int = REFERENCE_LEVEL
    MATRIX_NAMES = ("uc2e_inv", "dc2e_inv", "m2m", "l2l", "m2l")
    m2l_lookup: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.m2l_lookup = np.full((7, 7, 7), -1, dtype=np.int64)
        for i, (dx, dy, dz) in enumerate(self.transfer_vectors):
            self.m2l_lookup[dx + 3, dy + 3, dz + 3] = i
        self.grid_e = surface_grid(self.p)
        self.grid_c = surface_grid(self.p_check)

    @property
    def n_e(self):
        return n_surface(self.p)

    @property
    def n_c(self):
        return n_surface(self.p_check)

    @property
    def fingerprint(self):
        return fingerprint(self.p, self.p_check, self.alpha_inner, self.alpha_outer,
                           self.svd_cutoff, self.side)

    def m2l_matrix(self, vector):
        i = self.m2l_lookup[tuple(np.asarray(vector) + 3)]
        if i < 0:
            raise CacheConsistencyError(f"no M2L matrix for transfer vector {tuple(vector)}")
        return self.m2l[i]

    def matrices(self):
        """Named arrays in a fixed order (used by persistence)."""
        return {"uc2e_inv": self.uc2e_inv, "dc2e_inv": self.dc2e_inv, "m2m": self.m2m,
                "l2l": self.l2l, "m2l": self.m2l}


def precompute(p, side, alpha_inner=1.05, alpha_outer=2.95, svd_cutoff=1e-12, p_check=None,
               vectors=None):
    """Build every operator matrix for a root cube of edge ``side``."""
    p_check = p if p_check is None else p_check
    if p < 2 or p_check < 2:
        raise ValueError("expansion orders must be >= 2")
    if not 0 < alpha_inner < alpha_outer:
        raise ValueError("need 0 < alpha_inner < alpha_outer")
    if not 0 < svd_cutoff < 1:
        raise ValueError("svd_cutoff must lie in (0, 1)")
    grid_e, grid_c = surface_grid(p), surface_grid(p_check)
    h = side / 2 ** (REFERENCE_LEVEL + 1)

    up_equiv = alpha_inner * h * grid_e
    up_check = alpha_outer * h * grid_c
    down_check = alpha_inner * h * grid_c
    down_equiv = alpha_outer * h * grid_e

    uc2e_inv = truncated_pinv(kernel_matrix(up_equiv, up_check), svd_cutoff, "uc2e_inv")
    dc2e_inv = truncated_pinv(kernel_matrix(down_equiv, down_check), svd_cutoff, "dc2e_inv")

    n_e = len(grid_e)
    m2m = np.empty((8, n_e, n_e))
    l2l = np.empty((8, n_e, n_e))
    child_pinv = pinv_scale(REFERENCE_LEVEL + 1) / pinv_scale(REFERENCE_LEVEL)
    for octant in range(8):
        delta = np.array([(octant >> 2) & 1, (octant >> 1) & 1, octant & 1])
        child_center = (2 * delta - 1) * h / 2
        child_equiv = child_center + alpha_inner * (h / 2) * grid_e
        m2m[octant] = uc2e_inv @ kernel_matrix(child_equiv, up_check)
        child_check = child_center + alpha_inner * (h / 2) * grid_c
        l2l[octant] = child_pinv * dc2e_inv @ kernel_matrix(down_equiv, child_check)

    vectors = transfer_vectors() if vectors is None else np.asarray(vectors, dtype=np.int64)
    m2l = np.empty((len(vectors), len(grid_c), n_e))
    for i, tv in enumerate(vectors):
        m2l[i] = kernel_matrix(tv * 2 * h + up_equiv, down_check)
    for name, mat in (("m2m", m2m), ("l2l", l2l), ("m2l", m2l)):
        if not np.all(np.isfinite(mat)):
            raise PrecomputeError(f"{name}: non-finite entries")
    return OperatorCache(p, p_check, float(alpha_inner), float(alpha_outer), float(svd_cutoff),
                         float(side), uc2e_inv, dc2e_inv, m2m, l2l, m2l, vectors)


@dataclass
class Expansions:
    """Multipole and local coefficients, one row of ``n_e`` per tree node."""

    multipole: np.ndarray
    local: np.ndarray

    @classmethod
    def zeros(cls, n_nodes, n_e):
        return cls(np.zeros((n_nodes, n_e)), np.zeros((n_nodes, n_e)))

    def zero(self):
        self.multipole[:] = 0.0
        self.local[:] = 0.0


# -- compiled kernels --------------------------------------------------------

@njit(cache=True, inline="always")
def _matvec_add(mat, vec, out, scale):
    for r in range(mat.shape[0]):
        acc = 0.0
        for c in range(mat.shape[1]):
            acc += mat[r, c] * vec[c]
        out[r] += scale * acc


@njit(cache=True, inline="always")
def _potential_at(px, py, pz, pos, q, start, end):
    acc = 0.0
    for i in range(start, end):
        dx = pos[i, 0] - px
        dy = pos[i, 1] - py
        dz = pos[i, 2] - pz
        r2 = dx * dx + dy * dy + dz * dz
        if r2 > 0.0:
            acc += q[i] / math.sqrt(r2)
    return acc * INV_4PI


@njit(cache=True, inline="always")
def _surface_potential(pts_c, pts_h, grid, alpha, coeff, tx, ty, tz):
    acc = 0.0
    s = alpha * pts_h
    for e in range(grid.shape[0]):
        dx = pts_c[0] + s * grid[e, 0] - tx
        dy = pts_c[1] + s * grid[e, 1] - ty
        dz = pts_c[2] + s * grid[e, 2] - tz
        r2 = dx * dx + dy * dy + dz * dz
        if r2 > 0.0:
            acc += coeff[e] / math.sqrt(r2)
    return acc * INV_4PI


@njit(cache=True, parallel=True)
def _p2m(leaves, leaf_nodes, leaf_ptr, pos, q, centers, half, level, grid_c, alpha,
         uc2e_inv, ref, multipole, calls):
    n_c = grid_c.shape[0]
    for ii in prange(len(leaves)):
        i = leaves[ii]
        g = leaf_nodes[i]
        check = np.zeros(n_c)
        s = alpha * half[g]
        for k in range(n_c):
            check[k] = _potential_at(centers[g, 0] + s * grid_c[k, 0],
                                     centers[g, 1] + s * grid_c[k, 1],
                                     centers[g, 2] + s * grid_c[k, 2],
                                     pos, q, leaf_ptr[i], leaf_ptr[i + 1])
        scale = 2.0 ** (ref - level[g])
        _matvec_add(uc2e_inv, check, multipole[g], scale)
        calls[i] += 1


@njit(cache=True, parallel=True)
def _m2m(parents, child_ptr, octant, m2m, multipole):
    for ii in prange(len(parents)):
        g = parents[ii]
        for c in range(child_ptr[g, 0], child_ptr[g, 1]):
            _matvec_add(m2m[octant[c]], multipole[c], multipole[g], 1.0)


@njit(cache=True, parallel=True)
def _m2l(targets, v_ptr, v, anchor, level, lookup, m2l, dc2e_inv, ref, multipole, local):
    n_c = m2l.shape[1]
    missing = 0
    for ii in prange(len(targets)):
        g = targets[ii]
        check = np.zeros(n_c)
        for k in range(v_ptr[g], v_ptr[g + 1]):
            s = v[k]
            t = lookup[anchor[s, 0] - anchor[g, 0] + 3, anchor[s, 1] - anchor[g, 1] + 3,
                       anchor[s, 2] - anchor[g, 2] + 3]
            if t < 0:
                missing += 1
                continue
            _matvec_add(m2l[t], multipole[s], check, 1.0)
        lv = level[g]
        scale = 2.0 ** (lv - ref) * 2.0 ** (ref - lv)
        _matvec_add(dc2e_inv, check, local[g], scale)
    return missing


@njit(cache=True, parallel=True)
def _l2l(children, node_parent, octant, l2l, local):
    for ii in prange(len(children)):
        c = children[ii]
        _matvec_add(l2l[octant[c]], local[node_parent[c]], local[c], 1.0)


@njit(cache=True, parallel=True)
def _p2l(leaves, leaf_nodes, node_leaf, leaf_ptr, x_ptr, x, pos, q, centers, half, level,
         grid_c, alpha, dc2e_inv, ref, local, calls):
    n_c = grid_c.shape[0]
    for ii in prange(len(leaves)):
        i = leaves[ii]
        g = leaf_nodes[i]
        calls[i] += 1
        if x_ptr[i] == x_ptr[i + 1]:
            continue
        check = np.zeros(n_c)
        s = alpha * half[g]
        for k in range(n_c):
            px = centers[g, 0] + s * grid_c[k, 0]
            py = centers[g, 1] + s * grid_c[k, 1]
            pz = centers[g, 2] + s * grid_c[k, 2]
            for m in range(x_ptr[i], x_ptr[i + 1]):
                src = node_leaf[x[m]]
                check[k] += _potential_at(px, py, pz, pos, q, leaf_ptr[src], leaf_ptr[src + 1])
        scale = 2.0 ** (ref - level[g])
        _matvec_add(dc2e_inv, check, local[g], scale)


@njit(cache=True, parallel=True)
def _m2p(leaves, leaf_ptr, w_ptr, w, pos, centers, half, grid_e, alpha, multipole, out, calls):
    for ii in prange(len(leaves)):
        i = leaves[ii]
        calls[i] += 1
        for j in range(leaf_ptr[i], leaf_ptr[i + 1]):
            acc = 0.0
            for m in range(w_ptr[i], w_ptr[i + 1]):
                s = w[m]
                acc += _surface_potential(centers[s], half[s], grid_e, alpha, multipole[s],
                                          pos[j, 0], pos[j, 1], pos[j, 2])
            out[j] += acc


@njit(cache=True, parallel=True)
def _l2p_lookup(targets, owner, leaf_nodes, pos, centers, half, grid_e, alpha, local, out):
    # naive strategy: one task per target particle, surface data read from the tree
    n_e = grid_e.shape[0]
    for jj in prange(len(targets)):
        j = targets[jj]
        g = leaf_nodes[owner[jj]]
        s = alpha * half[g]
        acc = 0.0
        for e in range(n_e):
            dx = centers[g, 0] + s * grid_e[e, 0] - pos[j, 0]
            dy = centers[g, 1] + s * grid_e[e, 1] - pos[j, 1]
            dz = centers[g, 2] + s * grid_e[e, 2] - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 > 0.0:
                acc += local[g, e] / math.sqrt(r2)
        out[j] += acc * INV_4PI


@njit(cache=True, parallel=True)
def _l2p_gather(leaves, leaf_nodes, centers, half, grid_e, alpha, local, sx, sy, sz, coeff):
    n_e = grid_e.shape[0]
    for ii in prange(len(leaves)):
        g = leaf_nodes[leaves[ii]]
        s = alpha * half[g]
        base = ii * n_e
        for e in range(n_e):
            sx[base + e] = centers[g, 0] + s * grid_e[e, 0]
            sy[base + e] = centers[g, 1] + s * grid_e[e, 1]
            sz[base + e] = centers[g, 2] + s * grid_e[e, 2]
            coeff[base + e] = local[g, e]


@njit(cache=True, parallel=True)
def _l2p_contiguous(leaves, leaf_ptr, n_e, sx, sy, sz, coeff, pos, out, calls):
    for ii in prange(len(leaves)):
        i = leaves[ii]
        s0 = ii * n_e
        ax = sx[s0:s0 + n_e]
        ay = sy[s0:s0 + n_e]
        az = sz[s0:s0 + n_e]
        c = coeff[s0:s0 + n_e]
        calls[i] += 1
        for j in range(leaf_ptr[i], leaf_ptr[i + 1]):
            xj, yj, zj = pos[j, 0], pos[j, 1], pos[j, 2]
            acc = 0.0
            for e in range(n_e):
                dx = ax[e] - xj
                dy = ay[e] - yj
                dz = az[e] - zj
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0.0:
                    acc += c[e] / math.sqrt(r2)
            out[j] += acc * INV_4PI


@njit(cache=True, parallel=True)
def _near_field(leaves, leaf_ptr, node_leaf, u_ptr, u, pos, q, out, calls):
    for ii in prange(len(leaves)):
        i = leaves[ii]
        calls[i] += 1
        for j in range(leaf_ptr[i], leaf_ptr[i + 1]):
            acc = 0.0
            for m in range(u_ptr[i], u_ptr[i + 1]):
                src = node_leaf[u[m]]
                acc += _potential_at(pos[j, 0], pos[j, 1], pos[j, 2], pos, q,
                                     leaf_ptr[src], leaf_ptr[src + 1])
            out[j] += acc


# -- operator API ------------------------------------------------------------

def _all(n, subset):
    if subset is None:
        return np.arange(n, dtype=np.int64)
    return np.ascontiguousarray(np.atleast_1d(subset), dtype=np.int64)


def _counter(tree, calls):
    return np.zeros(tree.n_leaves, dtype=np.int64) if calls is None else calls


def p2m(tree, particles, cache, expansions, leaves=None, calls=None):
    """Multipole of each leaf from its own particles."""
    _p2m(_all(tree.n_leaves, leaves), tree.leaf_nodes, tree.leaf_ptr, particles.positions,
         particles.charges, tree.centers, tree.half_sides, tree.node_level, cache.grid_c,
         cache.alpha_outer, cache.uc2e_inv, cache.reference_level, expansions.multipole,
         _counter(tree, calls))


def m2m(tree, cache, expansions, level):
    """Translate children's multipoles into their parents at ``level``."""
    block = np.arange(tree.level_ptr[level], tree.level_ptr[level + 1], dtype=np.int64)
    parents = block[tree.child_ptr[block, 1] > tree.child_ptr[block, 0]]
    _m2m(parents, tree.child_ptr, tree.node_octant, cache.m2m, expansions.multipole)


def m2l(tree, lists, cache, expansions, level, targets=None):
    """Local expansions at ``level`` from the multipoles of their V lists."""
    if targets is None:
        targets = np.arange(tree.level_ptr[level], tree.level_ptr[level + 1], dtype=np.int64)
    missing = _m2l(np.ascontiguousarray(targets, dtype=np.int64), lists.v_ptr, lists.v,
                   tree.node_anchor, tree.node_level, cache.m2l_lookup, cache.m2l,
                   cache.dc2e_inv, cache.reference_level, expansions.multipole,
                   expansions.local)
    if missing:
        raise CacheConsistencyError(f"{missing} V-list entries have no M2L matrix")


def l2l(tree, cache, expansions, level):
    """Pass local expansions from nodes at ``level`` down to their children."""
    block = np.arange(tree.level_ptr[level + 1], tree.level_ptr[level + 2], dtype=np.int64)
    _l2l(block, tree.node_parent, tree.node_octant, cache.l2l, expansions.local)


def p2l(tree, lists, particles, cache, expansions, leaves=None, calls=None):
    """Local expansion of each leaf from the particles of its X list."""
    _p2l(_all(tree.n_leaves, leaves), tree.leaf_nodes, tree.node_leaf, tree.leaf_ptr,
         lists.x_ptr, lists.x, particles.positions, particles.charges, tree.centers,
         tree.half_sides, tree.node_level, cache.grid_c, cache.alpha_inner, cache.dc2e_inv,
         cache.reference_level, expansions.local, _counter(tree, calls))


def m2p(tree, lists, particles, cache, expansions, potentials, leaves=None, calls=None):
    """Potentials at leaf particles from the multipoles of their W lists."""
    _m2p(_all(tree.n_leaves, leaves), tree.leaf_ptr, lists.w_ptr, lists.w,
         particles.positions, tree.centers, tree.half_sides, cache.grid_e, cache.alpha_inner,
         expansions.multipole, potentials, _counter(tree, calls))


def l2p(tree, particles, cache, expansions, potentials, leaves=None, calls=None,
        cache_local=True):
    """Potentials at leaf particles from their own local expansions.

    With ``cache_local`` the equivalent-surface points and coefficients of all
    leaves are first gathered into contiguous coordinate-major buffers, so each
    task streams unit-stride arrays (targets are already contiguous per leaf).
    Otherwise the loop runs naively over target particles, each looking its
    leaf's surface and coefficients up from the tree.
    """
    leaves = _all(tree.n_leaves, leaves)
    calls = _counter(tree, calls)
    if not cache_local:
        counts = tree.leaf_ptr[leaves + 1] - tree.leaf_ptr[leaves]
        owner = np.repeat(leaves, counts)
        targets = np.concatenate([np.arange(tree.leaf_ptr[i], tree.leaf_ptr[i + 1])
                                  for i in leaves]) if len(leaves) else owner
        _l2p_lookup(targets.astype(np.int64), owner, tree.leaf_nodes, particles.positions,
                    tree.centers, tree.half_sides, cache.grid_e, cache.alpha_outer,
                    expansions.local, potentials)
        calls[leaves] += 1
        return
    n_e = cache.n_e
    sx, sy, sz, coeff = (np.empty(len(leaves) * n_e) for _ in range(4))
    _l2p_gather(leaves, tree.leaf_nodes, tree.centers, tree.half_sides, cache.grid_e,
                cache.alpha_outer, expansions.local, sx, sy, sz, coeff)
    _l2p_contiguous(leaves, tree.leaf_ptr, n_e, sx, sy, sz, coeff, particles.positions,
                    potentials, calls)


def near_field(tree, lists, particles, potentials, leaves=None, calls=None):
    """Direct interactions of each leaf with its U list (itself included)."""
    _near_field(_all(tree.n_leaves, leaves), tree.leaf_ptr, tree.node_leaf, lists.u_ptr,
                lists.u, particles.positions, particles.charges, potentials,
                _counter(tree, calls))
