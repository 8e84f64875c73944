"""
On-disk operator cache.

Layout::

    bytes 0..8     magic  b"KIFMMOPS"
    bytes 8..16    manifest length M, little-endian uint64
    bytes 16..16+M UTF-8 JSON manifest
    padding        zeros up to a multiple of 64
    payload        one segment per matrix, each 64-byte aligned

Matrices are little-endian IEEE-754 doubles in row-major order. The manifest
records the format version, the config fingerprint and, for every matrix, its
name, shape and byte offset relative to the payload start.
"""
import json
import struct

import numpy as np

from .operators import FORMAT_VERSION, OperatorCache

MAGIC = b"KIFMMOPS"
ALIGN = 64
_DTYPE = np.dtype("<f8")


class CacheError(Exception):
    """Base class for cache problems."""


class CacheIOError(CacheError):
    pass


class CacheCorruptError(CacheError):
    pass


class CacheVersionError(CacheError):
    pass


class CacheMismatchError(CacheError):
    """The archive was built for a different configuration."""


def _pad(n):
    return -n % ALIGN


def save_cache(cache, path):
    catalog = []
    offset = 0
    for name, mat in cache.matrices().items():
        catalog.append({"name": name, "shape": list(mat.shape), "offset": offset})
        offset += mat.size * _DTYPE.itemsize
        offset += _pad(offset)
    manifest = {
        "version": FORMAT_VERSION,
        "fingerprint": cache.fingerprint,
        "config": {"p": cache.p, "p_check": cache.p_check, "alpha_inner": cache.alpha_inner,
                   "alpha_outer": cache.alpha_outer, "svd_cutoff": cache.svd_cutoff,
                   "side": cache.side, "reference_level": cache.reference_level},
        "transfer_vectors": cache.transfer_vectors.tolist(),
        "matrices": catalog,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<Q", len(head)) + head)
            fh.write(b"\0" * _pad(16 + len(head)))
            for mat in cache.matrices().values():
                raw = np.ascontiguousarray(mat, dtype=_DTYPE).tobytes()
                fh.write(raw + b"\0" * _pad(len(raw)))
    except OSError as exc:
        raise CacheIOError(f"cannot write operator cache {path}: {exc}") from exc


def read_manifest(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CacheIOError(f"cannot read operator cache {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != MAGIC:
        raise CacheCorruptError(f"{path}: not an operator cache")
    (size,) = struct.unpack("<Q", data[8:16])
    if 16 + size > len(data):
        raise CacheCorruptError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16:16 + size].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheCorruptError(f"{path}: malformed manifest ({exc})") from exc
    start = 16 + size + _pad(16 + size)
    return manifest, data, start


def load_cache(path, expected_fingerprint=None):
    """Load a cache, checking version and (optionally) the config fingerprint."""
    manifest, data, start = read_manifest(path)
    if manifest.get("version") != FORMAT_VERSION:
        raise CacheVersionError(
            f"{path}: format version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    if expected_fingerprint is not None and manifest.get("fingerprint") != expected_fingerprint:
        raise CacheMismatchError(f"{path}: built for a different configuration")
    try:
        payload_bytes = manifest["payload_bytes"]
        catalog = manifest["matrices"]
        cfg = manifest["config"]
        vectors = np.asarray(manifest["transfer_vectors"], dtype=np.int64).reshape(-1, 3)
    except (KeyError, TypeError, ValueError) as exc:
        raise CacheCorruptError(f"{path}: incomplete manifest ({exc})") from exc
    if len(data) - start < payload_bytes:
        raise CacheCorruptError(
            f"{path}: payload truncated ({len(data) - start} of {payload_bytes} bytes)")
    mats = {}
    for entry in catalog:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        lo = start + entry["offset"]
        if entry["offset"] % ALIGN or lo + count * _DTYPE.itemsize > len(data):
            raise CacheCorruptError(f"{path}: bad segment for {entry['name']}")
        arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=lo)
        mats[entry["name"]] = arr.reshape(shape).astype(np.float64)
    if set(mats) != set(OperatorCache.MATRIX_NAMES):
        raise CacheCorruptError(f"{path}: matrix catalog is incomplete")
    cache = OperatorCache(
        p=cfg["p"], p_check=cfg["p_check"], alpha_inner=cfg["alpha_inner"],
        alpha_outer=cfg["alpha_outer"], svd_cutoff=cfg["svd_cutoff"], side=cfg["side"],
        uc2e_inv=mats["uc2e_inv"], dc2e_inv=mats["dc2e_inv"], m2m=mats["m2m"],
        l2l=mats["l2l"], m2l=mats["m2l"], transfer_vectors=vectors,
        reference_level=cfg["reference_level"],
    )
    if cache.fingerprint != manifest["fingerprint"]:
        raise CacheCorruptError(f"{path}: manifest fingerprint does not match its config")
    return cache
