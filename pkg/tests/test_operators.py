import numpy as np
import pytest

from kifmm import operators as ops
from kifmm.fmm import Fmm, FmmConfig
from kifmm.kernel import kernel_matrix, laplace_scale, p2p

P = 5
SIDE = 1.7


@pytest.fixture(scope="module")
def cache():
    return ops.precompute(P, SIDE)


def test_transfer_vectors():
    tv = ops.transfer_vectors()
    assert tv.shape == (316, 3)
    assert len({tuple(v) for v in tv}) == 316
    cheb = np.abs(tv).max(axis=1)
    assert cheb.min() == 2 and cheb.max() == 3


def test_shapes(cache):
    n_e = cache.n_e
    assert cache.uc2e_inv.shape == cache.dc2e_inv.shape == (n_e, n_e)
    assert cache.m2m.shape == cache.l2l.shape == (8, n_e, n_e)
    assert cache.m2l.shape == (316, n_e, n_e)
    assert np.array_equal(cache.m2l_matrix((3, -2, 0)),
                          cache.m2l[cache.m2l_lookup[6, 1, 3]])
    with pytest.raises(ops.CacheConsistencyError):
        cache.m2l_matrix((1, 0, 0))


def test_truncated_pinv():
    rng = np.random.default_rng(0)
    u, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    v, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    # clear gap around the cutoff so the kept subspace is well defined
    s = np.r_[np.logspace(0, -6, 12), np.logspace(-14, -16, 8)]
    a = (u * s) @ v.T
    inv = ops.truncated_pinv(a, 1e-12, "a")
    kept = slice(0, 12)
    ref = (v[:, kept] / s[kept]) @ u[:, kept].T
    assert np.allclose(inv, ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())
    assert np.allclose(a @ inv @ a, a, atol=1e-12)
    with pytest.raises(ops.PrecomputeError):
        ops.truncated_pinv(np.full((3, 3), np.nan), 1e-12, "nan")
    with pytest.raises(ops.PrecomputeError):
        ops.truncated_pinv(np.zeros((3, 3)), 1e-12, "zero")


def _surfaces(level, cache):
    h = SIDE / 2 ** (level + 1)
    return (cache.alpha_inner * h * cache.grid_e, cache.alpha_outer * h * cache.grid_c,
            cache.alpha_outer * h * cache.grid_e, cache.alpha_inner * h * cache.grid_c, h)


@pytest.mark.parametrize("level", [1, 3, 5])
def test_level_scaling_identity(cache, level):
    up_e, up_c, down_e, down_c, h = _surfaces(level, cache)
    direct_uc = kernel_matrix(up_e, up_c)
    ref_uc = kernel_matrix(*_surfaces(ops.REFERENCE_LEVEL, cache)[:2])
    assert np.allclose(direct_uc, laplace_scale(level) * ref_uc, rtol=1e-13)
    # the check-to-equivalent inverse applied to a check potential scales inversely
    phi = direct_uc @ np.random.default_rng(level).standard_normal(len(up_e))
    direct_inv = ops.truncated_pinv(direct_uc, cache.svd_cutoff, "uc")
    assert np.allclose(direct_inv @ phi, ops.pinv_scale(level) * cache.uc2e_inv @ phi,
                       rtol=1e-8, atol=1e-8 * np.abs(direct_inv @ phi).max())
    # M2M built directly at this level equals the level-invariant cached one
    for octant in (0, 5):
        delta = np.array([(octant >> 2) & 1, (octant >> 1) & 1, octant & 1])
        child = (2 * delta - 1) * h / 2 + cache.alpha_inner * (h / 2) * cache.grid_e
        m2m = direct_inv @ kernel_matrix(child, up_c)
        assert np.allclose(m2m, cache.m2m[octant], atol=1e-8 * np.abs(cache.m2m).max())
    tv = np.array([2, -3, 1])
    m2l = kernel_matrix(tv * 2 * h + up_e, down_c)
    assert np.allclose(m2l, laplace_scale(level) * cache.m2l_matrix(tv), rtol=1e-13)


def test_multipole_reproduces_far_field(cache):
    rng = np.random.default_rng(3)
    h = SIDE / 8
    src = (rng.random((50, 3)) * 2 - 1) * h
    q = rng.uniform(-1, 1, 50)
    up_e, up_c = _surfaces(ops.REFERENCE_LEVEL, cache)[:2]
    dens = cache.uc2e_inv @ p2p(src, q, up_c)
    far = rng.standard_normal((30, 3))
    far = 4 * h * far / np.abs(far).max(axis=1)[:, None]
    exact = p2p(src, q, far)
    approx = p2p(up_e, dens, far)
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 1e-4


def test_fingerprint_sensitivity():
    base = dict(p=6, p_check=6, alpha_inner=1.05, alpha_outer=2.95, svd_cutoff=1e-12, side=1.0)
    ref = ops.fingerprint(**base)
    assert ops.fingerprint(**base) == ref
    for key, value in [("p", 5), ("p_check", 7), ("alpha_inner", 1.1), ("alpha_outer", 3.0),
                       ("svd_cutoff", 1e-10), ("side", 2.0)]:
        assert ops.fingerprint(**{**base, key: value}) != ref


def test_precompute_validation():
    with pytest.raises(ValueError):
        ops.precompute(1, 1.0)
    with pytest.raises(ValueError):
        ops.precompute(4, 1.0, alpha_inner=3.0, alpha_outer=2.0)
    with pytest.raises(ValueError):
        ops.precompute(4, 1.0, svd_cutoff=0.0)


def test_missing_transfer_vector_is_reported(two_cluster):
    tree, lists, particles = two_cluster
    partial = ops.precompute(3, tree.domain.side, vectors=ops.transfer_vectors()[:10])
    exp = ops.Expansions.zeros(tree.n_nodes, partial.n_e)
    with pytest.raises(ops.CacheConsistencyError):
        ops.m2l(tree, lists, partial, exp, 3)


def test_l2p_strategies_agree(two_cluster):
    tree, _, particles = two_cluster
    cache = ops.precompute(4, tree.domain.side, vectors=np.empty((0, 3), dtype=np.int64))
    exp = ops.Expansions.zeros(tree.n_nodes, cache.n_e)
    exp.local[:] = np.random.default_rng(0).standard_normal(exp.local.shape)
    out = [np.zeros(len(particles)) for _ in range(2)]
    calls = [np.zeros(tree.n_leaves, dtype=np.int64) for _ in range(2)]
    for flag, phi, c in zip((False, True), out, calls):
        ops.l2p(tree, particles, cache, exp, phi, calls=c, cache_local=flag)
    assert np.array_equal(out[0], out[1])
    assert np.all(calls[0] == 1) and np.all(calls[1] == 1)
    subset = np.arange(0, tree.n_leaves, 3)
    part = np.zeros(len(particles))
    ops.l2p(tree, particles, cache, exp, part, leaves=subset, cache_local=True)
    rows = np.concatenate([np.arange(tree.leaf_ptr[i], tree.leaf_ptr[i + 1]) for i in subset])
    assert np.array_equal(part[rows], out[0][rows])


def test_operator_linearity(two_cluster):
    tree, _, particles = two_cluster
    rng = np.random.default_rng(7)
    q1, q2 = rng.uniform(-1, 1, (2, len(particles)))
    cfg = FmmConfig(p=4, n_crit=30)

    def solve(q):
        ps = type(particles)(particles.positions, q)
        return Fmm(ps, cfg).run()

    lhs = solve(q1 + 2.5 * q2)
    rhs = solve(q1) + 2.5 * solve(q2)
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-12
