"""
Morton keys for a linear octree.

A key packs a node's anchor and level into one 64-bit integer. The anchor is
stored on the finest grid (``anchor << (MAX_LEVEL - level)``), bit-interleaved
with x as the most significant bit of each triplet, and shifted left by
``LEVEL_BITS``; the level sits in the low nibble. With this layout, sorting raw
keys gives Z-curve order at a fixed level, and places every ancestor directly
before its descendants.

Scalar helpers work on Python ints; the ``*_array`` variants work on int64
arrays and are what the tree and list builders use.
"""
from dataclasses import dataclass

import numpy as np

MAX_LEVEL = 15
LEVEL_BITS = 4
LEVEL_MASK = (1 << LEVEL_BITS) - 1
ROOT = 0

_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


class InvalidKeyError(ValueError):
    """Raised for anchors or levels outside the representable range."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned root cube ``[origin, origin + side]^3``."""

    origin: tuple
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"domain side must be positive, got {self.side}")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "side", float(self.side))

    @classmethod
    def from_points(cls, points, margin=1e-10):
        """Tight bounding cube of ``points``, grown by ``margin * side`` on each side."""
        points = np.asarray(points, dtype=np.float64)
        lo = points.min(axis=0)
        extent = float((points.max(axis=0) - lo).max())
        if extent == 0.0:
            extent = 1.0
        pad = margin * extent
        return cls(tuple(lo - pad), extent + 2 * pad)

    def contains(self, points):
        points = np.asarray(points, dtype=np.float64)
        lo = np.asarray(self.origin)
        return np.all((points >= lo) & (points <= lo + self.side), axis=-1)


def _spread(n):
    n &= 0x1FFFFF
    n = (n | (n << 32)) & 0x1F00000000FFFF
    n = (n | (n << 16)) & 0x1F0000FF0000FF
    n = (n | (n << 8)) & 0x100F00F00F00F00F
    n = (n | (n << 4)) & 0x10C30C30C30C30C3
    n = (n | (n << 2)) & 0x1249249249249249
    return n


def _compact(n):
    n &= 0x1249249249249249
    n = (n ^ (n >> 2)) & 0x10C30C30C30C30C3
    n = (n ^ (n >> 4)) & 0x100F00F00F00F00F
    n = (n ^ (n >> 8)) & 0x1F0000FF0000FF
    n = (n ^ (n >> 16)) & 0x1F00000000FFFF
    n = (n ^ (n >> 32)) & 0x1FFFFF
    return n


def interleave(x, y, z):
    """Z-curve index of finest-grid coordinates (works on ints or int64 arrays)."""
    return (_spread(x) << 2) | (_spread(y) << 1) | _spread(z)


def deinterleave(code):
    return _compact(code >> 2), _compact(code >> 1), _compact(code)


def encode(anchor, level):
    """Return the raw key of the node with ``anchor`` at ``level``."""
    level = int(level)
    if not 0 <= level <= MAX_LEVEL:
        raise InvalidKeyError(f"level {level} outside [0, {MAX_LEVEL}]")
    x, y, z = (int(a) for a in anchor)
    bound = 1 << level
    if not (0 <= x < bound and 0 <= y < bound and 0 <= z < bound):
        raise InvalidKeyError(f"anchor {(x, y, z)} outside level-{level} grid")
    shift = MAX_LEVEL - level
    return (interleave(x << shift, y << shift, z << shift) << LEVEL_BITS) | level


def decode(key):
    """Return ``(anchor, level)`` for a raw key."""
    key = int(key)
    level = key & LEVEL_MASK
    shift = MAX_LEVEL - level
    x, y, z = deinterleave(key >> LEVEL_BITS)
    return (x >> shift, y >> shift, z >> shift), level


def level_of(key):
    return int(key) & LEVEL_MASK


def parent(key):
    anchor, level = decode(key)
    if level == 0:
        raise InvalidKeyError("the root has no parent")
    return encode([a >> 1 for a in anchor], level - 1)


def children(key):
    """The 8 children of ``key`` in ascending raw order (octant ``4*dx + 2*dy + dz``)."""
    (x, y, z), level = decode(key)
    if level >= MAX_LEVEL:
        raise InvalidKeyError(f"level {level} nodes cannot be subdivided")
    return [
        encode((2 * x + dx, 2 * y + dy, 2 * z + dz), level + 1)
        for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)
    ]


def neighbors(key):
    """Same-level keys within the 26-neighbourhood of ``key``, ascending."""
    anchor, level = decode(key)
    cand = np.asarray(anchor, dtype=np.int64) + _OFFSETS
    inside = np.all((cand >= 0) & (cand < (1 << level)), axis=1)
    return sorted(encode(a, level) for a in cand[inside])


def _cube(key):
    anchor, level = decode(key)
    size = 1 << (MAX_LEVEL - level)
    lo = [a * size for a in anchor]
    return lo, size


def is_ancestor(a, b):
    """True if ``a`` is a proper ancestor of ``b``."""
    la, lb = level_of(a), level_of(b)
    if la >= lb:
        return False
    (xb, yb, zb), _ = decode(b)
    d = lb - la
    return encode((xb >> d, yb >> d, zb >> d), la) == int(a)


def is_adjacent(a, b):
    """True if the closed cubes of ``a`` and ``b`` touch and neither contains the other."""
    if int(a) == int(b) or is_ancestor(a, b) or is_ancestor(b, a):
        return False
    lo_a, sa = _cube(a)
    lo_b, sb = _cube(b)
    return all(la <= lb + sb and lb <= la + sa for la, lb in zip(lo_a, lo_b))


def node_bounds(key, domain):
    """Return ``(center, half_side)`` of ``key`` inside ``domain``."""
    anchor, level = decode(key)
    width = domain.side / (1 << level)
    center = np.asarray(domain.origin) + (np.asarray(anchor, dtype=np.float64) + 0.5) * width
    return center, 0.5 * width


# -- array variants ----------------------------------------------------------

def encode_array(anchors, levels):
    anchors = np.asarray(anchors, dtype=np.int64)
    levels = np.broadcast_to(np.asarray(levels, dtype=np.int64), anchors.shape[:1])
    shift = MAX_LEVEL - levels
    code = interleave(anchors[:, 0] << shift, anchors[:, 1] << shift, anchors[:, 2] << shift)
    return (code << LEVEL_BITS) | levels


def decode_array(keys):
    keys = np.asarray(keys, dtype=np.int64)
    levels = keys & LEVEL_MASK
    shift = MAX_LEVEL - levels
    x, y, z = deinterleave(keys >> LEVEL_BITS)
    return np.stack([x >> shift, y >> shift, z >> shift], axis=1), levels


def node_bounds_array(keys, domain):
    anchors, levels = decode_array(keys)
    width = domain.side / np.exp2(levels)
    centers = np.asarray(domain.origin) + (anchors + 0.5) * width[:, None]
    return centers, 0.5 * width


def point_codes(points, domain):
    """Finest-grid Z-curve codes of ``points``.

    Cells are half-open ``[lo, hi)`` except on the domain's upper faces, so a
    point on an internal split plane lands in the higher-index cell.
    """
    points = np.asarray(points, dtype=np.float64)
    if not np.all(domain.contains(points)):
        raise ValueError("points lie outside the domain")
    n = 1 << MAX_LEVEL
    scaled = (points - np.asarray(domain.origin)) / domain.side * n
    grid = np.clip(np.floor(scaled).astype(np.int64), 0, n - 1)
    return interleave(grid[:, 0], grid[:, 1], grid[:, 2])


def codes_to_keys(codes, level):
    """Keys at ``level`` of the nodes containing finest-grid ``codes``."""
    mask = ~((1 << (3 * (MAX_LEVEL - level))) - 1)
    return ((np.asarray(codes, dtype=np.int64) & mask) << LEVEL_BITS) | level
