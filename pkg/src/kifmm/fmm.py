"""
The FMM driver.

``Fmm`` owns one problem: it builds the tree and interaction lists, loads or
precomputes the operator cache, and runs the upward and downward passes over
flat coefficient and potential buffers.
"""
import logging
import math
import os
import time
import warnings
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from numba import njit, prange

from . import operators as ops
from .lists import build_lists
from .morton import Domain
from .persistence import CacheError, CacheMismatchError, load_cache, save_cache
from .tree import ParticleSet, build_tree

log = logging.getLogger(__name__)

LEAF_OPERATORS = ("p2m", "p2l", "m2p", "l2p", "near_field")
LEVEL_OPERATORS = ("m2m", "m2l", "l2l")


@dataclass
class FmmConfig:
    p: int = 6
    n_crit: int = 150
    alpha_inner: float = 1.05
    alpha_outer: float = 2.95
    svd_cutoff: float = 1e-12
    threads: int = 0
    l2p_cache_local: bool = True
    p_check: int = None

    def __post_init__(self):
        if self.p < 2 or (self.p_check is not None and self.p_check < 2):
            raise ValueError("expansion order must be >= 2")
        if self.n_crit < 1:
            raise ValueError("n_crit must be >= 1")
        if not 0 < self.alpha_inner < self.alpha_outer:
            raise ValueError("need 0 < alpha_inner < alpha_outer")
        if not 0 < self.svd_cutoff < 1:
            raise ValueError("svd_cutoff must lie in (0, 1)")
        if self.threads < 0:
            raise ValueError("threads must be >= 0")

    def to_dict(self):
        return asdict(self)


def set_threads(threads):
    """Apply a worker count (0 = all available); returns the count in effect."""
    limit = numba.config.NUMBA_NUM_THREADS
    want = limit if threads == 0 else threads
    if want > limit:
        warnings.warn(f"{want} threads requested but only {limit} available; using {limit}",
                      RuntimeWarning, stacklevel=2)
        want = limit
    numba.set_num_threads(want)
    return want


@dataclass
class FmmState:
    tree: object
    lists: object
    cache: object
    expansions: object
    particles: ParticleSet
    potentials: np.ndarray
    timings: dict = field(default_factory=dict)
    level_calls: dict = field(default_factory=dict)
    leaf_calls: dict = field(default_factory=dict)


class Fmm:
    """Kernel-independent FMM for the 3D Laplace kernel.

    >>> fmm = Fmm(particles, FmmConfig(p=6, n_crit=150))
    >>> phi = fmm.run()
    """

    def __init__(self, particles, config=None, cache_path=None, domain=None):
        self.config = config or FmmConfig()
        self.cache_path = cache_path
        self.threads = set_threads(self.config.threads)
        t0 = time.perf_counter()
        domain = domain or Domain.from_points(particles.positions)
        tree, sorted_particles = build_tree(particles, self.config.n_crit, domain)
        t1 = time.perf_counter()
        lists = build_lists(tree)
        t2 = time.perf_counter()
        cache = self._operator_cache(domain.side)
        t3 = time.perf_counter()
        self.state = FmmState(
            tree=tree, lists=lists, cache=cache,
            expansions=ops.Expansions.zeros(tree.n_nodes, cache.n_e),
            particles=sorted_particles, potentials=np.zeros(len(particles)),
        )
        self.setup_timings = {"tree": t1 - t0, "lists": t2 - t1, "precompute": t3 - t2}

    @property
    def tree(self):
        return self.state.tree

    @property
    def lists(self):
        return self.state.lists

    @property
    def cache(self):
        return self.state.cache

    def _operator_cache(self, side):
        cfg = self.config
        p_check = cfg.p if cfg.p_check is None else cfg.p_check
        want = ops.fingerprint(cfg.p, p_check, cfg.alpha_inner, cfg.alpha_outer,
                               cfg.svd_cutoff, side)
        if self.cache_path and os.path.exists(self.cache_path):
            try:
                return load_cache(self.cache_path, want)
            except CacheMismatchError:
                warnings.warn(f"operator cache {self.cache_path} was built for another "
                              f"configuration; rebuilding", RuntimeWarning, stacklevel=3)
            except CacheError as exc:
                warnings.warn(f"operator cache unusable ({exc}); rebuilding", RuntimeWarning,
                              stacklevel=3)
        cache = ops.precompute(cfg.p, side, cfg.alpha_inner, cfg.alpha_outer, cfg.svd_cutoff,
                               p_check=p_check)
        if self.cache_path:
            save_cache(cache, self.cache_path)
        return cache

    @contextmanager
    def _timed(self, name):
        t0 = time.perf_counter()
        yield
        self.state.timings[name] += time.perf_counter() - t0

    def run(self):
        """Evaluate all potentials; returns them in the input particle order."""
        s = self.state
        tree, lists, cache, exp = s.tree, s.lists, s.cache, s.expansions
        particles = s.particles
        set_threads(self.config.threads)
        exp.zero()
        s.potentials[:] = 0.0
        s.timings = defaultdict(float)
        s.level_calls = {name: 0 for name in LEVEL_OPERATORS}
        s.leaf_calls = {name: np.zeros(tree.n_leaves, dtype=np.int64) for name in LEAF_OPERATORS}
        t_start = time.perf_counter()

        with self._timed("p2m"):
            ops.p2m(tree, particles, cache, exp, calls=s.leaf_calls["p2m"])
        for level in range(tree.depth - 1, -1, -1):
            with self._timed("m2m"):
                ops.m2m(tree, cache, exp, level)
            s.level_calls["m2m"] += 1

        for level in range(2, tree.depth + 1):
            with self._timed("m2l"):
                ops.m2l(tree, lists, cache, exp, level)
            s.level_calls["m2l"] += 1
            if level < tree.depth:
                with self._timed("l2l"):
                    ops.l2l(tree, cache, exp, level)
                s.level_calls["l2l"] += 1

        with self._timed("p2l"):
            ops.p2l(tree, lists, particles, cache, exp, calls=s.leaf_calls["p2l"])
        with self._timed("m2p"):
            ops.m2p(tree, lists, particles, cache, exp, s.potentials, calls=s.leaf_calls["m2p"])
        with self._timed("l2p"):
            ops.l2p(tree, particles, cache, exp, s.potentials, calls=s.leaf_calls["l2p"],
                    cache_local=self.config.l2p_cache_local)
        with self._timed("near_field"):
            ops.near_field(tree, lists, particles, s.potentials,
                           calls=s.leaf_calls["near_field"])

        s.timings["total"] = time.perf_counter() - t_start
        s.timings = dict(s.timings)
        out = np.empty_like(s.potentials)
        out[particles.original_index] = s.potentials
        return out


def run(particles, config=None, cache_path=None):
    """One-shot evaluation: ``(potentials, timings)`` with potentials in input order."""
    fmm = Fmm(particles, config, cache_path)
    phi = fmm.run()
    return phi, {**fmm.setup_timings, **fmm.state.timings}


@njit(cache=True, parallel=True)
def _direct(pos, q, out):
    n = pos.shape[0]
    for j in prange(n):
        acc = 0.0
        for i in range(n):
            if i == j:
                continue
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r = math.sqrt(dx * dx + dy * dy + dz * dz)
            if r > 0.0:
                acc += q[i] / (4.0 * math.pi * r)
        out[j] = acc


def direct(particles):
    """All-pairs evaluation of the Laplace potential, O(N^2); the reference answer."""
    out = np.empty(len(particles))
    _direct(particles.positions, particles.charges, out)
    return out


def relative_error(a, b):
    """``||a - b||_2 / ||b||_2``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ref = np.linalg.norm(b)
    if ref == 0.0:
        raise ValueError("reference vector has zero norm")
    return float(np.linalg.norm(a - b) / ref)
