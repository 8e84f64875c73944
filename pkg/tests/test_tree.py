import numpy as np
import pytest

from kifmm import morton
from kifmm.morton import MAX_LEVEL, Domain
from kifmm.tree import ParticleSet, ancestors_by_level, balance_tree, build_tree

from .conftest import adjacent, make_tree


def check_invariants(tree, particles):
    leaves = [int(k) for k in tree.leaves]
    assert leaves == sorted(leaves)
    # pairwise non-overlapping: no leaf is an ancestor of another
    for level_keys in tree.keys_by_level[:-1]:
        internal = set(int(k) for k in level_keys) - set(leaves)
        assert not (set(leaves) & internal)
    leaf_set = set(leaves)
    for k in leaves:
        a = k
        while morton.level_of(a) > 0:
            a = morton.parent(a)
            assert a not in leaf_set
    ptr = tree.leaf_ptr
    assert ptr[0] == 0 and ptr[-1] == len(particles) and np.all(np.diff(ptr) > 0)
    counts = np.diff(ptr)
    levels = tree.leaves & morton.LEVEL_MASK
    assert np.all((counts <= tree.n_crit) | (levels == MAX_LEVEL))
    # each particle lies inside its leaf
    centers, half = morton.node_bounds_array(tree.leaves, tree.domain)
    owner = np.repeat(np.arange(tree.n_leaves), counts)
    assert np.all(np.abs(particles.positions - centers[owner]) <= half[owner, None] * (1 + 1e-9))
    assert sorted(particles.original_index) == list(range(len(particles)))


def check_balance_brute_force(tree):
    leaves = [int(k) for k in tree.leaves]
    for i, a in enumerate(leaves):
        for b in leaves[i + 1:]:
            if adjacent(a, b):
                assert abs(morton.level_of(a) - morton.level_of(b)) <= 1, (a, b)


def test_single_leaf():
    pts = np.random.default_rng(0).random((10, 3))
    tree, _ = build_tree(ParticleSet(pts, np.ones(10)), 10)
    assert tree.depth == 0 and list(tree.leaves) == [morton.ROOT]
    assert tree.n_nodes == 1


def test_octants_split_once(octant_points):
    particles, domain = octant_points
    tree, _ = build_tree(particles, 2, domain)
    assert tree.n_leaves == 8 and tree.depth == 1
    assert list(tree.leaves) == morton.children(morton.ROOT)


@pytest.mark.parametrize("kind,n,n_crit", [("uniform-cube", 2000, 25), ("two-cluster", 2000, 10),
                                           ("sphere-surface", 3000, 40)])
def test_invariants(kind, n, n_crit):
    tree, particles = make_tree(kind, n, seed=3, n_crit=n_crit)
    check_invariants(tree, particles)
    check_balance_brute_force(tree)


def test_particles_grouped_per_leaf():
    tree, particles = make_tree("two-cluster", 1500, seed=2, n_crit=12)
    codes = morton.point_codes(particles.positions, tree.domain)
    assert np.all(np.diff(codes) >= 0)


def test_index_maps():
    tree, _ = make_tree("two-cluster", 1000, seed=4, n_crit=8)
    assert np.array_equal(tree.index_of_array(tree.nodes), np.arange(tree.n_nodes))
    assert tree.index_of_array([morton.encode((0, 0, 0), MAX_LEVEL)])[0] == -1
    for i, k in enumerate(tree.leaves[:20]):
        assert tree.leaf_index(k) == i
    with pytest.raises(KeyError):
        tree.index_of(morton.encode((0, 0, 0), MAX_LEVEL))
    for g in range(1, tree.n_nodes):
        assert tree.nodes[tree.node_parent[g]] == morton.parent(int(tree.nodes[g]))
    for g in range(tree.n_nodes):
        lo, hi = tree.child_ptr[g]
        kids = [int(k) for k in tree.nodes[lo:hi]]
        assert all(morton.parent(c) == int(tree.nodes[g]) for c in kids)
        assert (hi == lo) == tree.is_leaf(g)


def test_keys_by_level_are_ancestors():
    tree, _ = make_tree("sphere-surface", 2000, seed=1, n_crit=30)
    by_level = ancestors_by_level(tree.leaves)
    assert len(by_level) == tree.depth + 1
    for ours, ref in zip(tree.keys_by_level, by_level):
        assert np.array_equal(ours, ref)


def test_duplicates_at_max_level_warn():
    pts = np.vstack([np.full((20, 3), 0.25), np.random.default_rng(0).random((10, 3))])
    with pytest.warns(RuntimeWarning):
        tree, particles = build_tree(ParticleSet(pts, np.ones(30)), 5)
    assert tree.depth == MAX_LEVEL
    assert tree.warnings
    assert np.diff(tree.leaf_ptr).max() == 20
    check_invariants(tree, particles)


def test_balance_idempotent_on_uniform():
    leaves = [morton.encode(a, 2) for a in np.ndindex(4, 4, 4)]
    codes = morton.encode_array(np.array(list(np.ndindex(4, 4, 4))), 2) >> morton.LEVEL_BITS
    out, ptr = balance_tree(np.sort(leaves), codes)
    assert list(out) == sorted(leaves)
    assert np.array_equal(ptr, np.arange(65))


def test_balance_refines_unbalanced_set():
    # one corner refined to level 3, everything else a level-1 leaf
    deep = morton.children(morton.children(morton.children(morton.ROOT)[0])[0])
    rest = morton.children(morton.children(morton.ROOT)[0])[1:] + morton.children(morton.ROOT)[1:]
    leaves = np.sort(np.array(deep + rest, dtype=np.int64))
    codes = np.sort(np.array([int(k) >> morton.LEVEL_BITS for k in leaves]))
    out, _ = balance_tree(leaves, codes)
    out = [int(k) for k in out]
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            if adjacent(a, b):
                assert abs(morton.level_of(a) - morton.level_of(b)) <= 1
    assert max(morton.level_of(k) for k in out) == 3


def test_unbalanced_option_and_errors():
    tree, _ = make_tree("two-cluster", 500, n_crit=5)
    pts = np.random.default_rng(0).random((50, 3))
    with pytest.raises(ValueError):
        build_tree(ParticleSet(pts, np.ones(50)), 0)
    with pytest.raises(ValueError):
        build_tree(ParticleSet(pts, np.ones(50)), 5, Domain((2.0, 2.0, 2.0), 1.0))
    with pytest.raises(ValueError):
        ParticleSet(pts[:, :2], np.ones(50))
    raw, _ = build_tree(ParticleSet(pts, np.ones(50)), 2, balance=False)
    assert raw.n_leaves <= build_tree(ParticleSet(pts, np.ones(50)), 2)[0].n_leaves
    assert tree.n_leaves > 1
