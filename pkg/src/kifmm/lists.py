"""
U, V, W and X interaction lists.

Lists are computed once per tree and stored as CSR pairs ``(ptr, idx)`` of
global node indices. U, W and X are indexed by leaf; V by global node.
Entries within each list are sorted by Morton key.
"""
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .morton import LEVEL_BITS, MAX_LEVEL

U_MAX, V_MAX, W_MAX, X_MAX = 60, 189, 148, 19
_SCRATCH = 4096


@njit(cache=True, inline="always")
def _spread(n):
    n &= 0x1FFFFF
    n = (n | (n << 32)) & 0x1F00000000FFFF
    n = (n | (n << 16)) & 0x1F0000FF0000FF
    n = (n | (n << 8)) & 0x100F00F00F00F00F
    n = (n | (n << 4)) & 0x10C30C30C30C30C3
    n = (n | (n << 2)) & 0x1249249249249249
    return n


@njit(cache=True)
def _key(x, y, z, level):
    s = MAX_LEVEL - level
    code = (_spread(x << s) << 2) | (_spread(y << s) << 1) | _spread(z << s)
    return (code << LEVEL_BITS) | level


@njit(cache=True)
def _find(nodes, level_ptr, depth, x, y, z, level):
    if level > depth:
        return -1
    k = _key(x, y, z, level)
    lo = level_ptr[level]
    hi = level_ptr[level + 1]
    pos = lo + np.searchsorted(nodes[lo:hi], k)
    if pos < hi and nodes[pos] == k:
        return pos
    return -1


@njit(cache=True)
def _touching(anchor, level, i, j):
    """Closed cubes of nodes i, j intersect and neither contains the other."""
    si = 1 << (MAX_LEVEL - level[i])
    sj = 1 << (MAX_LEVEL - level[j])
    inside_ij = True
    inside_ji = True
    for d in range(3):
        li = anchor[i, d] * si
        lj = anchor[j, d] * sj
        if li > lj + sj or lj > li + si:
            return False
        if not (li <= lj and lj + sj <= li + si):
            inside_ij = False
        if not (lj <= li and li + si <= lj + sj):
            inside_ji = False
    return not (inside_ij or inside_ji)


@njit(cache=True)
def _push_unique(buf, n, value):
    for k in range(n):
        if buf[k] == value:
            return n
    buf[n] = value
    return n + 1


@njit(cache=True)
def _sort_by_key(buf, n, nodes):
    for a in range(1, n):
        v = buf[a]
        b = a - 1
        while b >= 0 and nodes[buf[b]] > nodes[v]:
            buf[b + 1] = buf[b]
            b -= 1
        buf[b + 1] = v


@njit(cache=True)
def _u_of(g, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr, buf):
    lv = level[g]
    n = 0
    buf[n] = g
    n += 1
    stack = np.empty(_SCRATCH, dtype=np.int64)
    bound = 1 << lv
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                x, y, z = anchor[g, 0] + dx, anchor[g, 1] + dy, anchor[g, 2] + dz
                if x < 0 or y < 0 or z < 0 or x >= bound or y >= bound or z >= bound:
                    continue
                idx = _find(nodes, level_ptr, depth, x, y, z, lv)
                if idx >= 0:
                    top = 0
                    stack[top] = idx
                    top += 1
                    while top > 0:
                        top -= 1
                        c = stack[top]
                        if node_leaf[c] >= 0:
                            n = _push_unique(buf, n, c)
                        else:
                            for cc in range(child_ptr[c, 0], child_ptr[c, 1]):
                                if _touching(anchor, level, cc, g):
                                    stack[top] = cc
                                    top += 1
                else:
                    # region is covered by a coarser node, or is empty
                    for k in range(lv - 1, -1, -1):
                        sh = lv - k
                        a = _find(nodes, level_ptr, depth, x >> sh, y >> sh, z >> sh, k)
                        if a >= 0:
                            if node_leaf[a] >= 0:
                                n = _push_unique(buf, n, a)
                            break
    return n


@njit(cache=True)
def _w_of(g, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr, buf):
    lv = level[g]
    n = 0
    stack = np.empty(_SCRATCH, dtype=np.int64)
    bound = 1 << lv
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                x, y, z = anchor[g, 0] + dx, anchor[g, 1] + dy, anchor[g, 2] + dz
                if x < 0 or y < 0 or z < 0 or x >= bound or y >= bound or z >= bound:
                    continue
                idx = _find(nodes, level_ptr, depth, x, y, z, lv)
                if idx < 0 or node_leaf[idx] >= 0:
                    continue
                top = 0
                stack[top] = idx
                top += 1
                while top > 0:
                    top -= 1
                    c = stack[top]
                    for cc in range(child_ptr[c, 0], child_ptr[c, 1]):
                        if _touching(anchor, level, cc, g):
                            if node_leaf[cc] < 0:
                                stack[top] = cc
                                top += 1
                        else:
                            buf[n] = cc
                            n += 1
    return n


@njit(cache=True)
def _x_of(g, nodes, level_ptr, depth, level, anchor, node_leaf, buf):
    lv = level[g]
    n = 0
    if lv < 1:
        return 0
    pl = lv - 1
    px, py, pz = anchor[g, 0] >> 1, anchor[g, 1] >> 1, anchor[g, 2] >> 1
    bound = 1 << pl
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                x, y, z = px + dx, py + dy, pz + dz
                if x < 0 or y < 0 or z < 0 or x >= bound or y >= bound or z >= bound:
                    continue
                for k in range(pl, -1, -1):
                    sh = pl - k
                    a = _find(nodes, level_ptr, depth, x >> sh, y >> sh, z >> sh, k)
                    if a >= 0:
                        if node_leaf[a] >= 0 and not _touching(anchor, level, a, g):
                            n = _push_unique(buf, n, a)
                        break
    return n


@njit(cache=True)
def _v_of(g, nodes, level_ptr, depth, level, anchor, child_ptr, buf):
    lv = level[g]
    n = 0
    if lv < 2:
        return 0
    pl = lv - 1
    px, py, pz = anchor[g, 0] >> 1, anchor[g, 1] >> 1, anchor[g, 2] >> 1
    bound = 1 << pl
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                x, y, z = px + dx, py + dy, pz + dz
                if x < 0 or y < 0 or z < 0 or x >= bound or y >= bound or z >= bound:
                    continue
                m = _find(nodes, level_ptr, depth, x, y, z, pl)
                if m < 0:
                    continue
                for c in range(child_ptr[m, 0], child_ptr[m, 1]):
                    if (abs(anchor[c, 0] - anchor[g, 0]) > 1 or abs(anchor[c, 1] - anchor[g, 1]) > 1
                            or abs(anchor[c, 2] - anchor[g, 2]) > 1):
                        buf[n] = c
                        n += 1
    return n


@njit(cache=True)
def _one(kind, g, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr, buf):
    if kind == 0:
        n = _u_of(g, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr, buf)
    elif kind == 1:
        n = _v_of(g, nodes, level_ptr, depth, level, anchor, child_ptr, buf)
    elif kind == 2:
        n = _w_of(g, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr, buf)
    else:
        n = _x_of(g, nodes, level_ptr, depth, level, anchor, node_leaf, buf)
    _sort_by_key(buf, n, nodes)
    return n


@njit(cache=True, parallel=True)
def _count(kind, targets, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr):
    counts = np.zeros(len(targets), dtype=np.int64)
    for i in prange(len(targets)):
        buf = np.empty(_SCRATCH, dtype=np.int64)
        counts[i] = _one(kind, targets[i], nodes, level_ptr, depth, level, anchor,
                         node_leaf, child_ptr, buf)
    return counts


@njit(cache=True, parallel=True)
def _fill(kind, targets, ptr, nodes, level_ptr, depth, level, anchor, node_leaf, child_ptr):
    out = np.empty(ptr[-1], dtype=np.int64)
    for i in prange(len(targets)):
        buf = np.empty(_SCRATCH, dtype=np.int64)
        n = _one(kind, targets[i], nodes, level_ptr, depth, level, anchor, node_leaf,
                 child_ptr, buf)
        out[ptr[i]:ptr[i] + n] = buf[:n]
    return out


_KINDS = {"u": 0, "v": 1, "w": 2, "x": 3}


def _tree_args(tree):
    return (tree.nodes, tree.level_ptr, tree.depth, tree.node_level, tree.node_anchor,
            tree.node_leaf, tree.child_ptr)


def _build(kind, targets, tree):
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    args = _tree_args(tree)
    counts = _count(_KINDS[kind], targets, *args)
    ptr = np.r_[0, np.cumsum(counts)].astype(np.int64)
    return ptr, _fill(_KINDS[kind], targets, ptr, *args)


@dataclass
class InteractionLists:
    """CSR interaction lists of a tree.

    V is indexed by global node index; U, W and X only exist for leaves and
    are indexed by leaf index. Entries are always global node indices.
    """

    u_ptr: np.ndarray
    u: np.ndarray
    v_ptr: np.ndarray
    v: np.ndarray
    w_ptr: np.ndarray
    w: np.ndarray
    x_ptr: np.ndarray
    x: np.ndarray

    def sizes(self, kind):
        ptr = getattr(self, f"{kind}_ptr")
        return np.diff(ptr)

    def of(self, kind, i):
        ptr = getattr(self, f"{kind}_ptr")
        return getattr(self, kind)[ptr[i]:ptr[i + 1]]

    def stats(self, tree):
        """min/mean/max list sizes; V over nodes at level >= 2, the rest over leaves."""
        out = {}
        for kind in "uvwx":
            sizes = self.sizes(kind)
            if kind == "v":
                sizes = sizes[tree.node_level >= 2]
            if len(sizes) == 0:
                sizes = np.zeros(1, dtype=np.int64)
            out[kind] = {"min": int(sizes.min()), "mean": float(sizes.mean()),
                         "max": int(sizes.max())}
        return out


def build_lists(tree):
    """All four interaction lists for ``tree``."""
    leaves = tree.leaf_nodes
    nodes = np.arange(tree.n_nodes, dtype=np.int64)
    u_ptr, u = _build("u", leaves, tree)
    v_ptr, v = _build("v", nodes, tree)
    w_ptr, w = _build("w", leaves, tree)
    x_ptr, x = _build("x", leaves, tree)
    return InteractionLists(u_ptr, u, v_ptr, v, w_ptr, w, x_ptr, x)


def _leaf_query(kind, key, tree):
    g = tree.index_of_array([key])[0]
    if g < 0 or tree.node_leaf[g] < 0:
        raise ValueError(f"key {key} is not a leaf of the tree")
    _, idx = _build(kind, [g], tree)
    return [int(k) for k in tree.nodes[idx]]


def u_list(leaf, tree):
    """Leaves adjacent to ``leaf`` (any level), plus ``leaf`` itself."""
    return _leaf_query("u", leaf, tree)


def w_list(leaf, tree):
    """Non-adjacent children of ``leaf``'s refined neighbours."""
    return _leaf_query("w", leaf, tree)


def x_list(leaf, tree):
    """Coarser leaves adjacent to ``leaf``'s parent but not to ``leaf``."""
    return _leaf_query("x", leaf, tree)


def v_list(node, tree):
    """Same-level, non-adjacent children of the parent's neighbours."""
    g = tree.index_of(node)
    _, idx = _build("v", [g], tree)
    return [int(k) for k in tree.nodes[idx]]
