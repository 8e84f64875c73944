"""Check and equivalent surface grids."""
import numpy as np


def n_surface(p):
    return 6 * (p - 1) ** 2 + 2


def surface_grid(p):
    """Boundary points of the regular ``p**3`` grid on ``[-1, 1]^3``.

    Points are in lexicographic (x, y, z) index order; there are
    ``6 * (p - 1) ** 2 + 2`` of them.
    """
    if p < 2:
        raise ValueError(f"expansion order must be >= 2, got {p}")
    ticks = np.linspace(-1.0, 1.0, p)
    idx = np.indices((p, p, p)).reshape(3, -1).T
    on_boundary = np.any((idx == 0) | (idx == p - 1), axis=1)
    return np.ascontiguousarray(ticks[idx[on_boundary]])


def scaled_surface(grid, center, half_side, alpha):
    """Map a unit surface grid onto a node: ``center + alpha * half_side * grid``."""
    return np.asarray(center, dtype=np.float64) + alpha * half_side * np.asarray(grid)
