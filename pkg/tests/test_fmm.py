import math
import os
import subprocess
import sys

import numpy as np
import pytest

from kifmm.fmm import Fmm, FmmConfig, direct, relative_error, run, set_threads
from kifmm.generators import Distribution, random_charges, sample
from kifmm.kernel import p2p
from kifmm.tree import ParticleSet


def test_direct_examples():
    two = ParticleSet([[0.0, 0, 0], [1.0, 0, 0]], [1.0, 1.0])
    assert np.allclose(direct(two), 1 / (4 * math.pi))
    assert direct(ParticleSet([[0.3, 0.1, 0.2]], [2.0]))[0] == 0.0
    rng = np.random.default_rng(0)
    ps = ParticleSet(rng.random((300, 3)), rng.uniform(-1, 1, 300))
    ref = p2p(ps.positions, ps.charges, ps.positions)
    assert relative_error(direct(ps), ref) <= 1e-13


def test_relative_error():
    b = np.random.default_rng(1).standard_normal(20)
    assert relative_error(b, b) == 0.0
    assert relative_error(2 * b, b) == pytest.approx(1.0)
    a = b + 0.01
    assert relative_error(a, b) == pytest.approx(np.sqrt(np.sum((a - b) ** 2) / np.sum(b ** 2)))
    with pytest.raises(ValueError):
        relative_error(b, np.zeros(20))
    with pytest.raises(ValueError):
        relative_error(b, b[:3])


def test_single_leaf_is_pure_near_field():
    ps = random_charges(sample(Distribution("uniform-cube", 50, 2)), 2)
    phi, timings = run(ps, FmmConfig(n_crit=100))
    assert relative_error(phi, direct(ps)) <= 1e-13
    assert timings["total"] >= 0 and all(t >= 0 for t in timings.values())


@pytest.mark.parametrize("kind", ["uniform-cube", "two-cluster"])
def test_accuracy_moderate_order(kind):
    ps = random_charges(sample(Distribution(kind, 2000, 3)), 3)
    phi, _ = run(ps, FmmConfig(p=4, n_crit=25))
    assert relative_error(phi, direct(ps)) < 1e-3


def test_output_in_input_order():
    ps = sample(Distribution("two-cluster", 1500, 4))
    perm = np.random.default_rng(0).permutation(len(ps))
    shuffled = ParticleSet(ps.positions[perm], ps.charges[perm])
    cfg = FmmConfig(p=4, n_crit=20)
    a, _ = run(ps, cfg)
    b, _ = run(shuffled, cfg)
    assert np.allclose(a[perm], b, rtol=1e-12)


def test_state_and_counters(two_cluster):
    _, _, ps = two_cluster
    fmm = Fmm(ps, FmmConfig(p=3, n_crit=30))
    fmm.run()
    s = fmm.state
    d = fmm.tree.depth
    assert s.level_calls == {"m2m": d, "m2l": d - 1, "l2l": d - 2}
    for name, calls in s.leaf_calls.items():
        assert np.all(calls == 1), name
    assert len(s.potentials) == len(ps)
    assert s.expansions.multipole.shape == (fmm.tree.n_nodes, fmm.cache.n_e)


def test_run_is_repeatable_and_deterministic(two_cluster):
    _, _, ps = two_cluster
    fmm = Fmm(ps, FmmConfig(p=4, n_crit=30))
    first = fmm.run()
    assert np.array_equal(first, fmm.run())
    assert np.array_equal(first, Fmm(ps, FmmConfig(p=4, n_crit=30)).run())


def test_l2p_flag_does_not_change_result(two_cluster):
    _, _, ps = two_cluster
    a = Fmm(ps, FmmConfig(p=4, n_crit=30, l2p_cache_local=True)).run()
    b = Fmm(ps, FmmConfig(p=4, n_crit=30, l2p_cache_local=False)).run()
    assert np.array_equal(a, b)


@pytest.mark.parametrize("bad", [dict(p=1), dict(n_crit=0), dict(alpha_inner=3.0),
                                 dict(svd_cutoff=1.5), dict(threads=-1), dict(p_check=1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        FmmConfig(**bad)


def test_thread_request_clamped():
    import numba
    with pytest.warns(RuntimeWarning):
        got = set_threads(numba.config.NUMBA_NUM_THREADS + 3)
    assert got == numba.config.NUMBA_NUM_THREADS
    set_threads(0)


_THREAD_SCRIPT = """
import sys, numpy as np
from kifmm.fmm import Fmm, FmmConfig
from kifmm.generators import Distribution, random_charges, sample
ps = random_charges(sample(Distribution("two-cluster", 3000, 11)), 11)
for threads in (1, 2, 4, 0):
    phi = Fmm(ps, FmmConfig(p=4, n_crit=20, threads=threads)).run()
    sys.stdout.write(phi.tobytes().hex() + "\\n")
"""


def test_thread_count_independence():
    env = {**os.environ, "NUMBA_NUM_THREADS": "4"}
    out = subprocess.run([sys.executable, "-c", _THREAD_SCRIPT], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    assert len(out) == 4
    assert len(set(out)) == 1, "potentials differ between thread counts"
    ps = random_charges(sample(Distribution("two-cluster", 3000, 11)), 11)
    here = Fmm(ps, FmmConfig(p=4, n_crit=20, threads=1)).run()
    assert here.tobytes().hex() == out[0]
