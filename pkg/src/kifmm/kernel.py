"""
Laplace Green's function and the P2P operator.

All routines are compiled with numba. P2P is parallel over targets; each
target sums its sources in index order, so results do not depend on the
thread count.
"""
import math

import numpy as np
from numba import njit, prange

INV_4PI = 1.0 / (4.0 * math.pi)


def laplace_scale(level, reference_level=2):
    """Kernel homogeneity factor between ``reference_level`` and ``level``.

    Node widths halve per level and the kernel is homogeneous of degree -1, so
    a kernel matrix between same-shaped surfaces at ``level`` equals the
    reference one times ``2 ** (level - reference_level)``.
    """
    return 2.0 ** (level - reference_level)


@njit(cache=True)
def laplace(x, y):
    """``1 / (4 pi |x - y|)``, or 0 when the points coincide."""
    dx = x[0] - y[0]
    dy = x[1] - y[1]
    dz = x[2] - y[2]
    r2 = dx * dx + dy * dy + dz * dz
    if r2 == 0.0:
        return 0.0
    return INV_4PI / math.sqrt(r2)


@njit(cache=True, inline="always")
def _accumulate(sources, charges, tx, ty, tz):
    acc = 0.0
    for i in range(sources.shape[0]):
        dx = sources[i, 0] - tx
        dy = sources[i, 1] - ty
        dz = sources[i, 2] - tz
        r2 = dx * dx + dy * dy + dz * dz
        if r2 > 0.0:
            acc += charges[i] / math.sqrt(r2)
    return acc * INV_4PI


@njit(cache=True)
def p2p_serial(sources, charges, targets, out):
    """Add the potential of ``sources`` at ``targets`` into ``out``."""
    for j in range(targets.shape[0]):
        out[j] += _accumulate(sources, charges, targets[j, 0], targets[j, 1], targets[j, 2])


@njit(cache=True, parallel=True)
def _p2p_parallel(sources, charges, targets, out):
    for j in prange(targets.shape[0]):
        out[j] = _accumulate(sources, charges, targets[j, 0], targets[j, 1], targets[j, 2])


def p2p(sources, charges, targets):
    """Potentials at ``targets`` due to ``charges`` at ``sources``."""
    sources = np.ascontiguousarray(sources, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    charges = np.ascontiguousarray(charges, dtype=np.float64)
    if len(charges) != len(sources):
        raise ValueError("charges and sources disagree in length")
    out = np.zeros(len(targets))
    _p2p_parallel(sources, charges, targets, out)
    return out


@njit(cache=True, parallel=True)
def _fill_matrix(sources, targets, out):
    for j in prange(targets.shape[0]):
        for i in range(sources.shape[0]):
            dx = sources[i, 0] - targets[j, 0]
            dy = sources[i, 1] - targets[j, 1]
            dz = sources[i, 2] - targets[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            out[j, i] = INV_4PI / math.sqrt(r2) if r2 > 0.0 else 0.0


def kernel_matrix(sources, targets):
    """Dense ``(len(targets), len(sources))`` Laplace kernel matrix."""
    sources = np.ascontiguousarray(sources, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(targets), len(sources)))
    _fill_matrix(sources, targets, out)
    return out
