"""Shared fixtures and brute-force oracles."""
import itertools
import warnings

import numpy as np
import pytest

from kifmm import morton
from kifmm.generators import Distribution, random_charges, sample
from kifmm.lists import build_lists
from kifmm.tree import ParticleSet, build_tree


def make_tree(kind, n, seed=0, n_crit=20):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        particles = sample(Distribution(kind, n, seed))
        return build_tree(particles, n_crit)


def cube(key):
    """Closed integer cube of ``key`` on the finest grid: (lo, size)."""
    anchor, level = morton.decode(key)
    size = 1 << (morton.MAX_LEVEL - level)
    return np.asarray(anchor) * size, size


def touching(a, b):
    lo_a, sa = cube(a)
    lo_b, sb = cube(b)
    return bool(np.all(lo_a <= lo_b + sb) and np.all(lo_b <= lo_a + sa))


def contains(a, b):
    lo_a, sa = cube(a)
    lo_b, sb = cube(b)
    return bool(np.all(lo_a <= lo_b) and np.all(lo_b + sb <= lo_a + sa))


def adjacent(a, b):
    """Brute-force geometric adjacency: touching and neither contains the other."""
    return a != b and touching(a, b) and not contains(a, b) and not contains(b, a)


def oracle_lists(tree):
    """U, V, W, X for every node by direct geometric enumeration over all nodes."""
    nodes = [int(k) for k in tree.nodes]
    leaves = set(int(k) for k in tree.leaves)
    level = {k: morton.level_of(k) for k in nodes}
    parent = {k: (morton.parent(k) if level[k] else None) for k in nodes}
    out = {"u": {}, "v": {}, "w": {}, "x": {}}
    for b in nodes:
        pb = parent[b]
        out["v"][b] = sorted(
            a for a in nodes
            if level[b] >= 2 and level[a] == level[b] and adjacent(parent[a], pb)
            and not adjacent(a, b)
        )
    for b in leaves:
        out["u"][b] = sorted([b] + [a for a in leaves if adjacent(a, b)])
        colleagues = [c for c in nodes if level[c] == level[b] and adjacent(c, b)]
        w = [a for a in nodes
             if level[a] > level[b] and any(contains(c, a) for c in colleagues)
             and not adjacent(a, b) and adjacent(parent[a], b)]
        out["w"][b] = sorted(w)
    for b in leaves:
        out["x"][b] = sorted(a for a in leaves if b in out["w"][a])
    return out


@pytest.fixture(scope="session")
def two_cluster():
    tree, particles = make_tree("two-cluster", 3000, seed=1, n_crit=30)
    return tree, build_lists(tree), random_charges(particles, 1)


@pytest.fixture(scope="session")
def octant_points():
    """Two points in each of the 8 octants of the unit cube, and that cube."""
    rng = np.random.default_rng(5)
    pts = np.vstack([0.5 * np.asarray(corner) + 0.1 + 0.3 * rng.random((2, 3))
                     for corner in itertools.product((0, 1), repeat=3)])
    return ParticleSet(pts, np.ones(16)), morton.Domain((0.0, 0.0, 0.0), 1.0)


# -- acceptance verdicts --------------------------------------------------------

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record ``(ok, detail)`` for an acceptance criterion and assert it."""
    def record(number, ok, detail):
        VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
