"""The compiled kernels and their numpy references must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from levelk import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba unavailable")


def boxes(rng, n):
    return np.c_[rng.uniform(-4, 4, (n, 2)), rng.uniform(-4, 4, n), rng.uniform(0.3, 5, (n, 2))]


def test_box_overlap_agrees():
    rng = np.random.default_rng(0)
    a, b = boxes(rng, 5000), boxes(rng, 5000)
    assert np.array_equal(_accel.boxes_overlap(a, b), _accel.boxes_overlap_np(a, b))


def test_nearest_waypoint_agrees():
    rng = np.random.default_rng(1)
    route = np.cumsum(rng.normal(size=(800, 2)), 0)
    pts = rng.normal(scale=20, size=(300, 2))
    assert np.array_equal(_accel.nearest_waypoint(pts, route), _accel.nearest_waypoint_np(pts, route))


def test_rollout_agrees():
    rng = np.random.default_rng(2)
    acc, yaw = rng.normal(size=80), rng.normal(scale=0.3, size=80)
    a = _accel.rollout(1.0, 2.0, 0.3, 5.0, acc, yaw, 0.1)
    b = _accel.rollout_np(1.0, 2.0, 0.3, 5.0, acc, yaw, 0.1)
    assert np.abs(a - b).max() <= 1e-12


def test_kmeans_assign_agrees():
    rng = np.random.default_rng(3)
    pts, ctr = rng.normal(size=(400, 2)), rng.normal(size=(7, 2))
    i1, d1 = _accel.kmeans_assign(pts, ctr)
    i2, d2 = _accel.kmeans_assign_np(pts, ctr)
    assert np.array_equal(i1, i2) and np.allclose(d1, d2, rtol=1e-12)


def test_interaction_argmax_agrees():
    rng = np.random.default_rng(4)
    cur, prev = rng.normal(scale=5, size=(4, 3, 6, 2)), rng.normal(scale=5, size=(4, 2, 6, 2))
    valid = np.array([True, True, False, True])
    j1, n1, d1 = _accel.interaction_argmax(cur, prev, valid)
    j2, n2, d2 = _accel.interaction_argmax_np(cur, prev, valid)
    assert np.array_equal(j1, j2) and np.array_equal(n1, n2)
    assert np.allclose(d1, d2, rtol=1e-12)


def test_env_flag_disables_numba():
    env = dict(os.environ, LEVELK_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from levelk import _accel; print(_accel.HAVE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
