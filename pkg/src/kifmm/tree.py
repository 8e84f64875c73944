"""
Adaptive linear octree with 2:1 balancing.

The tree is never stored as node objects. It is a handful of flat arrays:
leaf keys, all node keys grouped by level, and index pointers tying each leaf
to a contiguous run of the Morton-sorted particle buffer.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import morton
from .morton import LEVEL_BITS, LEVEL_MASK, MAX_LEVEL, Domain


@dataclass
class ParticleSet:
    """Positions ``(N, 3)``, charges ``(N,)`` and the permutation back to input order."""

    positions: np.ndarray
    charges: np.ndarray
    original_index: np.ndarray = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.charges = np.ascontiguousarray(self.charges, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.charges.shape != (len(self.positions),):
            raise ValueError("charges and positions disagree in length")
        if self.original_index is None:
            self.original_index = np.arange(len(self.positions), dtype=np.int64)
        self.original_index = np.ascontiguousarray(self.original_index, dtype=np.int64)

    def __len__(self):
        return len(self.positions)

    def permuted(self, order):
        return ParticleSet(self.positions[order], self.charges[order], self.original_index[order])


@dataclass
class LinearTree:
    """Balanced linear octree.

    Nodes are indexed globally in ``(level, key)`` order, so the nodes of one
    level form the contiguous block ``level_ptr[l]:level_ptr[l + 1]``. Leaf
    ``i`` owns particles ``leaf_ptr[i]:leaf_ptr[i + 1]`` of the sorted buffer.
    """

    domain: Domain
    n_crit: int
    depth: int
    leaves: np.ndarray
    leaf_ptr: np.ndarray
    nodes: np.ndarray
    level_ptr: np.ndarray
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.node_level = (self.nodes & LEVEL_MASK).astype(np.int64)
        self.leaf_nodes = self.index_of_array(self.leaves)
        self.node_leaf = np.full(len(self.nodes), -1, dtype=np.int64)
        self.node_leaf[self.leaf_nodes] = np.arange(len(self.leaves))
        self.node_parent = np.full(len(self.nodes), -1, dtype=np.int64)
        self.child_ptr = np.zeros((len(self.nodes), 2), dtype=np.int64)
        for level in range(1, self.depth + 1):
            block = self.nodes[self.level_ptr[level]:self.level_ptr[level + 1]]
            parents = morton.codes_to_keys(block >> LEVEL_BITS, level - 1)
            pidx = self.index_of_array(parents)
            self.node_parent[self.level_ptr[level]:self.level_ptr[level + 1]] = pidx
            # children of one parent are contiguous within their level block
            starts = np.flatnonzero(np.r_[True, pidx[1:] != pidx[:-1]])
            ends = np.r_[starts[1:], len(pidx)]
            self.child_ptr[pidx[starts], 0] = starts + self.level_ptr[level]
            self.child_ptr[pidx[starts], 1] = ends + self.level_ptr[level]
        anchors, _ = morton.decode_array(self.nodes)
        self.node_anchor = anchors
        self.node_octant = (anchors[:, 0] & 1) * 4 + (anchors[:, 1] & 1) * 2 + (anchors[:, 2] & 1)
        self.centers, self.half_sides = morton.node_bounds_array(self.nodes, self.domain)

    @property
    def n_leaves(self):
        return len(self.leaves)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def keys_by_level(self):
        return [self.nodes[self.level_ptr[l]:self.level_ptr[l + 1]] for l in range(self.depth + 1)]

    @property
    def leaf_particle_ptr(self):
        return np.stack([self.leaf_ptr[:-1], self.leaf_ptr[1:]], axis=1)

    def is_leaf(self, index):
        return self.node_leaf[index] >= 0

    def index_of_array(self, keys):
        """Global node indices of ``keys``; -1 where a key is not in the tree."""
        keys = np.asarray(keys, dtype=np.int64)
        levels = keys & LEVEL_MASK
        out = np.full(len(keys), -1, dtype=np.int64)
        for level in np.unique(levels):
            if level > self.depth:
                continue
            lo, hi = self.level_ptr[level], self.level_ptr[level + 1]
            sel = levels == level
            pos = np.searchsorted(self.nodes[lo:hi], keys[sel])
            pos_c = np.minimum(pos, hi - lo - 1)
            found = (pos < hi - lo) & (self.nodes[lo:hi][pos_c] == keys[sel])
            out[np.flatnonzero(sel)[found]] = pos[found] + lo
        return out

    def index_of(self, key):
        idx = self.index_of_array([key])[0]
        if idx < 0:
            raise KeyError(f"key {key} is not in the tree")
        return int(idx)

    def leaf_index(self, key):
        idx = self.node_leaf[self.index_of(key)]
        if idx < 0:
            raise ValueError(f"key {key} is not a leaf")
        return int(idx)


# -- construction ------------------------------------------------------------

def _runs(values):
    """Start offsets and values of runs in a sorted array."""
    starts = np.flatnonzero(np.r_[True, values[1:] != values[:-1]])
    return starts, values[starts]


def _split_by_count(codes, n_crit, record):
    """Internal nodes of the unbalanced adaptive tree: nodes with more than n_crit points."""
    internal = {}
    for level in range(MAX_LEVEL + 1):
        keys = morton.codes_to_keys(codes, level)
        starts, uniq = _runs(keys)
        counts = np.diff(np.r_[starts, len(keys)])
        heavy = uniq[counts > n_crit]
        if len(heavy) == 0:
            break
        if level == MAX_LEVEL:
            msg = (f"{len(heavy)} leaves at MAX_LEVEL hold more than n_crit={n_crit} "
                   f"particles (coincident points)")
            record.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
            break
        internal[level] = heavy
        # only points inside heavy nodes can refine further
        codes = codes[np.isin(keys, heavy)]
    return internal


def _internal_from_leaves(leaves):
    internal = {}
    leaves = np.asarray(leaves, dtype=np.int64)
    levels = leaves & LEVEL_MASK
    codes = leaves >> LEVEL_BITS
    for level in range(int(levels.max()) if len(leaves) else 0):
        sel = levels > level
        if not np.any(sel):
            break
        internal[level] = np.unique(morton.codes_to_keys(codes[sel], level))
    return internal


def _ripple(internal):
    """Close an internal-node set under the balance rule.

    For every internal node ``c`` at level ``k``, its parent and all 26
    neighbours of its parent are made internal. This implies the usual 2:1
    condition between adjacent leaves and also forces every child of a leaf's
    same-level neighbour to be a leaf, so W lists hold leaves exactly one
    level finer than their target. Empty regions may become internal; their
    children simply carry no particles and are never stored.
    """
    internal = {lvl: np.asarray(v, dtype=np.int64) for lvl, v in internal.items() if len(v)}
    if not internal:
        return internal
    for level in range(max(internal), 0, -1):
        nodes = internal.get(level)
        if nodes is None or len(nodes) == 0:
            continue
        anchors, _ = morton.decode_array(nodes)
        pa = np.unique(anchors >> 1, axis=0)
        cand = (pa[:, None, :] + np.r_[[[0, 0, 0]], morton._OFFSETS][None]).reshape(-1, 3)
        bound = 1 << (level - 1)
        cand = cand[np.all((cand >= 0) & (cand < bound), axis=1)]
        new = morton.encode_array(cand, level - 1)
        prev = internal.get(level - 1, np.empty(0, dtype=np.int64))
        internal[level - 1] = np.union1d(prev, new)
    return internal


def _leaf_levels(codes, internal):
    levels = np.zeros(len(codes), dtype=np.int64)
    for level in sorted(internal):
        keys = morton.codes_to_keys(codes, level)
        inside = np.isin(keys, internal[level], assume_unique=False) & (levels == level)
        levels[inside] = level + 1
    return levels


def _leaves_from_codes(codes, internal):
    """Leaf key of every (sorted) point code, and the leaf run pointers."""
    levels = _leaf_levels(codes, internal)
    shift = 3 * (MAX_LEVEL - levels)
    point_leaf = (((codes >> shift) << shift) << LEVEL_BITS) | levels
    starts, leaves = _runs(point_leaf)
    return leaves, np.r_[starts, len(codes)].astype(np.int64)


def ancestors_by_level(leaves):
    """Sorted keys present at each level: all ancestors of ``leaves`` plus the leaves."""
    leaves = np.sort(np.asarray(leaves, dtype=np.int64))
    levels = leaves & LEVEL_MASK
    depth = int(levels.max())
    codes = leaves >> LEVEL_BITS
    out = []
    for level in range(depth + 1):
        sel = levels >= level
        out.append(np.unique(morton.codes_to_keys(codes[sel], level)))
    return out


def balance_tree(leaves, codes):
    """Refine ``leaves`` until the balance rule holds.

    ``codes`` are the finest-grid Morton codes of the particles; only
    non-empty leaves are returned. Returns ``(leaves, leaf_ptr)`` for the
    sorted codes.
    """
    codes = np.sort(np.asarray(codes, dtype=np.int64))
    internal = _ripple(_internal_from_leaves(leaves))
    if internal and max(internal) >= MAX_LEVEL:
        raise ValueError("balancing would refine past MAX_LEVEL")
    return _leaves_from_codes(codes, internal)


def build_tree(particles, n_crit, domain=None, balance=True):
    """Build a balanced linear octree and Morton-sort the particles.

    Returns ``(tree, sorted_particles)``; leaf ``i`` owns
    ``sorted_particles[tree.leaf_ptr[i]:tree.leaf_ptr[i + 1]]``.
    """
    if len(particles) < 1:
        raise ValueError("need at least one particle")
    if n_crit < 1:
        raise ValueError(f"n_crit must be >= 1, got {n_crit}")
    if domain is None:
        domain = Domain.from_points(particles.positions)
    codes = morton.point_codes(particles.positions, domain)
    order = np.argsort(codes, kind="stable")
    codes = codes[order]
    notes = []
    internal = _split_by_count(codes, n_crit, notes)
    if balance:
        internal = _ripple(internal)
    leaves, leaf_ptr = _leaves_from_codes(codes, internal)
    by_level = ancestors_by_level(leaves)
    nodes = np.concatenate(by_level)
    level_ptr = np.r_[0, np.cumsum([len(b) for b in by_level])].astype(np.int64)
    tree = LinearTree(
        domain=domain,
        n_crit=int(n_crit),
        depth=len(by_level) - 1,
        leaves=leaves,
        leaf_ptr=leaf_ptr,
        nodes=nodes,
        level_ptr=level_ptr,
        warnings=notes,
    )
    return tree, particles.permuted(order)
