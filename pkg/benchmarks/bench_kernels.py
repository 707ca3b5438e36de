"""Time each hot kernel on its numba path and its pure-numpy path.

    python benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]

The numba column is empty when numba is unavailable or disabled with
LEVELK_NUMBA=0. The first numba call (compilation) is excluded.
"""
import argparse
import csv
import sys
import time

import numpy as np

from levelk import _accel


def _cases(rng):
    boxes_a = np.column_stack([rng.uniform(-20, 20, (20000, 2)), rng.uniform(-np.pi, np.pi, 20000),
                               rng.uniform(2, 6, 20000), rng.uniform(1, 2.5, 20000)])
    boxes_b = np.column_stack([rng.uniform(-20, 20, (20000, 2)), rng.uniform(-np.pi, np.pi, 20000),
                               rng.uniform(2, 6, 20000), rng.uniform(1, 2.5, 20000)])
    pts = rng.uniform(0, 100, (500, 2))
    route = np.column_stack([np.arange(1000) * 0.1, np.zeros(1000)])
    acc, yaw = rng.normal(size=80), rng.normal(scale=0.2, size=80)
    km_pts, km_c = rng.normal(size=(5000, 2)), rng.normal(size=(64, 2))
    cur = rng.normal(scale=10, size=(8, 6, 50, 2))
    prev = rng.normal(scale=10, size=(8, 6, 50, 2))
    valid = np.ones(8, bool)
    return {
        "boxes_overlap (20k pairs)": (
            lambda: _accel.boxes_overlap(boxes_a, boxes_b), lambda: _accel.boxes_overlap_np(boxes_a, boxes_b)),
        "nearest_waypoint (500 x 1000)": (
            lambda: _accel.nearest_waypoint(pts, route), lambda: _accel.nearest_waypoint_np(pts, route)),
        "rollout (80 steps)": (
            lambda: _accel.rollout(0.0, 0.0, 0.1, 5.0, acc, yaw, 0.1),
            lambda: _accel.rollout_np(0.0, 0.0, 0.1, 5.0, acc, yaw, 0.1)),
        "kmeans_assign (5000 x 64)": (
            lambda: _accel.kmeans_assign(km_pts, km_c), lambda: _accel.kmeans_assign_np(km_pts, km_c)),
        "interaction_argmax (8x6x50)": (
            lambda: _accel.interaction_argmax(cur, prev, valid),
            lambda: _accel.interaction_argmax_np(cur, prev, valid)),
    }


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    rows = []
    for name, (fast, ref) in _cases(np.random.default_rng(0)).items():
        t_np = _time(ref, args.repeat)
        t_nb = None
        if _accel.HAVE_NUMBA:
            fast()     # compile
            t_nb = _time(fast, args.repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np,
                     "numba_ms": None if t_nb is None else 1e3 * t_nb,
                     "speedup": None if t_nb is None else t_np / t_nb})
    print(f"numba enabled: {_accel.HAVE_NUMBA}")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for r in rows:
        nb = "-" if r["numba_ms"] is None else f"{r['numba_ms']:.3f}"
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        print(f"{r['kernel']:32s} {r['numpy_ms']:10.3f} {nb:>10s} {sp:>8s}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
