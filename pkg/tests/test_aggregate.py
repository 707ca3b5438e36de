import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levelk.aggregate import em_reduce, joint_top6


def random_modes(rng, M=64, T=8):
    trajs = np.cumsum(rng.normal(size=(M, T, 2)), 1) * 2
    p = rng.random(M)
    return trajs, p / p.sum()


def test_identical_inputs_collapse():
    traj = np.cumsum(np.random.default_rng(0).normal(size=(10, 2)), 0)
    means, probs = em_reduce(np.repeat(traj[None], 64, 0), np.full(64, 1 / 64))
    assert np.array_equal(means, np.repeat(traj[None], 6, 0))
    assert abs(probs.sum() - 1) <= 1e-9


def test_two_clusters_give_weighted_means():
    rng = np.random.default_rng(1)
    a = rng.normal(scale=0.1, size=(20, 5, 2))
    b = rng.normal(scale=0.1, size=(12, 5, 2)) + 100
    p = rng.random(32)
    p /= p.sum()
    means, probs = em_reduce(np.vstack([a, b]), p, target=2)
    pa, pb = p[:20], p[20:]
    want = {0: (pa[:, None, None] * a).sum(0) / pa.sum(), 1: (pb[:, None, None] * b).sum(0) / pb.sum()}
    order = np.argsort(means[:, 0, 0])
    assert np.allclose(means[order[0]], want[0], atol=1e-9)
    assert np.allclose(means[order[1]], want[1], atol=1e-9)
    assert np.allclose(sorted(probs), sorted([pa.sum(), pb.sum()]), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mass_conserved(seed):
    trajs, p = random_modes(np.random.default_rng(seed))
    means, probs = em_reduce(trajs, p)
    assert means.shape == (6, 8, 2)
    assert abs(probs.sum() - 1) <= 1e-9
    assert np.all(np.diff(probs) <= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_input_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    trajs, p = random_modes(rng, M=24)
    perm = rng.permutation(24)
    m1, p1 = em_reduce(trajs, p)
    m2, p2 = em_reduce(trajs[perm], p[perm])
    assert np.allclose(m1, m2, atol=1e-9) and np.allclose(p1, p2, atol=1e-12)


def test_em_rejects_bad_inputs():
    with pytest.raises(ValueError):
        em_reduce(np.zeros((4, 3, 2)), np.full(4, 0.3))
    with pytest.raises(ValueError):
        em_reduce(np.zeros((4, 3, 2)), np.full(3, 1 / 3))


def test_joint_uniform_tie_rule():
    out = joint_top6(np.full(6, 1 / 6), np.full(6, 1 / 6))
    assert [(e.index_a, e.index_b) for e in out] == [(0, k) for k in range(6)]


def test_joint_top_pair_product():
    pa = np.array([0.9] + [0.02] * 5)
    out = joint_top6(pa, pa, np.arange(6), np.arange(6) * 10)
    assert (out[0].index_a, out[0].index_b) == (0, 0)
    assert out[0].confidence == pytest.approx(0.81)
    assert out[0].traj_b == 0


def test_joint_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pa, pb = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        if rng.random() < 0.2:      # exercise ties
            pb = np.round(pb, 1) + 1e-3
            pb /= pb.sum()
        pairs = sorted(itertools.product(range(6), range(6)), key=lambda ab: (-pa[ab[0]] * pb[ab[1]], ab))
        got = joint_top6(pa, pb)
        assert [(e.index_a, e.index_b) for e in got] == pairs[:6]
        conf = [e.confidence for e in got]
        assert conf == sorted(conf, reverse=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10), st.floats(0.1, 10))
def test_joint_scale_invariant(seed, ca, cb):
    rng = np.random.default_rng(seed)
    pa, pb = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    qa, qb = pa * ca, pb * cb
    a = [(e.index_a, e.index_b) for e in joint_top6(pa, pb)]
    b = [(e.index_a, e.index_b) for e in joint_top6(qa / qa.sum(), qb / qb.sum())]
    prod = np.sort((pa[:, None] * pb[None]).ravel())[::-1]
    if np.min(np.abs(np.diff(prod[:7]))) > 1e-12:
        assert a == b
