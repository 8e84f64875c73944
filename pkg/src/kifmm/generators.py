"""Synthetic point clouds for tests, benchmarks and the CLI."""
from dataclasses import dataclass

import numpy as np

from .tree import ParticleSet

KINDS = ("sphere-surface", "uniform-cube", "two-cluster")
CENTER = np.array([0.5, 0.5, 0.5])
RADIUS = 0.5


@dataclass(frozen=True)
class Distribution:
    kind: str
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution {self.kind!r}; choose from {KINDS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return CENTER + RADIUS * v


def _two_cluster(rng, n):
    # two tight blobs far apart force deep, uneven refinement
    centres = np.array([[0.3, 0.3, 0.3], [0.72, 0.68, 0.75]])
    which = rng.integers(0, 2, size=n)
    pts = centres[which] + 0.03 * rng.standard_normal((n, 3))
    return np.clip(pts, 0.0, 1.0)


def sample(dist):
    """Draw ``dist.n`` unit charges from ``dist``; deterministic in ``dist.seed``."""
    rng = np.random.default_rng(dist.seed)
    if dist.kind == "sphere-surface":
        pos = _sphere(rng, dist.n)
    elif dist.kind == "uniform-cube":
        pos = rng.random((dist.n, 3))
    else:
        pos = _two_cluster(rng, dist.n)
    return ParticleSet(pos, np.ones(dist.n))


def random_charges(particles, seed=0):
    """Same positions with charges uniform in [-1, 1]."""
    rng = np.random.default_rng(seed)
    return ParticleSet(particles.positions, rng.uniform(-1.0, 1.0, len(particles)))
