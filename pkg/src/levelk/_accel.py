"""Hot geometric kernels, compiled with numba when available.

Set ``LEVELK_NUMBA=0`` to force the plain numpy versions (useful for debugging
and for the benchmark). Both paths return identical results up to float
rounding; tests run them against each other.
"""
from __future__ import annotations

import math
import os

import numpy as np

_WANT_NUMBA = os.environ.get("LEVELK_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference implementations


def _box_axes_np(heading):
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)  # (..., 2, 2)


def boxes_overlap_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for rows of (x, y, heading, length, width)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    a, b = np.broadcast_arrays(a, b)
    d = b[..., :2] - a[..., :2]
    ax_a = _box_axes_np(a[..., 2])
    ax_b = _box_axes_np(b[..., 2])
    half_a = 0.5 * a[..., 3:5]
    half_b = 0.5 * b[..., 3:5]
    hit = np.ones(a.shape[:-1], bool)
    for axes in (ax_a, ax_b):
        for k in range(2):
            n = axes[..., k, :]
            ra = (half_a[..., 0] * np.abs((ax_a[..., 0, :] * n).sum(-1))
                  + half_a[..., 1] * np.abs((ax_a[..., 1, :] * n).sum(-1)))
            rb = (half_b[..., 0] * np.abs((ax_b[..., 0, :] * n).sum(-1))
                  + half_b[..., 1] * np.abs((ax_b[..., 1, :] * n).sum(-1)))
            hit &= np.abs((d * n).sum(-1)) <= ra + rb
    return hit


def nearest_waypoint_np(points: np.ndarray, route: np.ndarray) -> np.ndarray:
    """Index of the closest route waypoint for each point. Ties go to the lowest index."""
    p = np.asarray(points, np.float64).reshape(-1, 2)
    r = np.asarray(route, np.float64)[:, :2]
    out = np.empty(len(p), np.int64)
    for i in range(0, len(p), 256):
        chunk = p[i:i + 256]
        d2 = ((chunk[:, None, :] - r[None]) ** 2).sum(-1)
        out[i:i + 256] = d2.argmin(1)
    return out.reshape(np.shape(points)[:-1])


def rollout_np(x0, y0, theta0, v0, acc, yaw_rate, dt):
    """Euler rollout; returns (T+1, 4) rows of x, y, heading, speed."""
    T = len(acc)
    out = np.empty((T + 1, 4))
    out[0] = x0, y0, theta0, v0
    x, y, th, v = x0, y0, theta0, v0
    for t in range(T):
        x, y, th, v = (x + v * math.cos(th) * dt, y + v * math.sin(th) * dt,
                       th + yaw_rate[t] * dt, v + acc[t] * dt)
        out[t + 1] = x, y, th, v
    return out


def kmeans_assign_np(points: np.ndarray, centers: np.ndarray):
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
    idx = d2.argmin(1)
    return idx, d2[np.arange(len(points)), idx]


def interaction_argmax_np(cur: np.ndarray, prev: np.ndarray, valid: np.ndarray):
    """For cur (N, M, T, 2) and prev (N, Mp, T, 2) find, per (i, m, t), the
    closest other agent/mode (j, n) at the same step.

    Returns (j, n, dist); dist is inf where no other valid agent exists.
    """
    N, M, T, _ = cur.shape
    Mp = prev.shape[1]
    diff = cur[:, None, :, None] - prev[None, :, None]  # (N, N, M, Mp, T, 2)
    d = np.sqrt((diff ** 2).sum(-1))
    bad = ~(valid[:, None] & valid[None, :]) | np.eye(N, dtype=bool)
    d = np.where(bad[:, :, None, None, None], np.inf, d)
    d = np.moveaxis(d, (1, 3), (3, 4))  # (N, M, T, N, Mp)
    flat = d.reshape(N, M, T, N * Mp)
    k = flat.argmin(-1)
    dist = np.take_along_axis(flat, k[..., None], -1)[..., 0]
    return k // Mp, k % Mp, dist


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _overlap_one(ax, ay, ah, al, aw, bx, by, bh, bl, bw):
        ca, sa = math.cos(ah), math.sin(ah)
        cb, sb = math.cos(bh), math.sin(bh)
        dx, dy = bx - ax, by - ay
        axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
        for k in range(4):
            nx, ny = axes[k]
            ra = 0.5 * al * abs(ca * nx + sa * ny) + 0.5 * aw * abs(-sa * nx + ca * ny)
            rb = 0.5 * bl * abs(cb * nx + sb * ny) + 0.5 * bw * abs(-sb * nx + cb * ny)
            if abs(dx * nx + dy * ny) > ra + rb:
                return False
        return True

    @njit(cache=True)
    def _overlap_rows(a, b):
        n = a.shape[0]
        out = np.empty(n, np.bool_)
        for i in range(n):
            out[i] = _overlap_one(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4],
                                  b[i, 0], b[i, 1], b[i, 2], b[i, 3], b[i, 4])
        return out

    @njit(cache=True)
    def _nearest_rows(p, r):
        n = p.shape[0]
        out = np.empty(n, np.int64)
        for i in range(n):
            best = np.inf
            k = 0
            for j in range(r.shape[0]):
                dx = p[i, 0] - r[j, 0]
                dy = p[i, 1] - r[j, 1]
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
                    k = j
            out[i] = k
        return out

    @njit(cache=True)
    def _rollout_nb(x0, y0, theta0, v0, acc, yaw_rate, dt):
        T = acc.shape[0]
        out = np.empty((T + 1, 4))
        x, y, th, v = x0, y0, theta0, v0
        out[0, 0], out[0, 1], out[0, 2], out[0, 3] = x, y, th, v
        for t in range(T):
            nx = x + v * math.cos(th) * dt
            ny = y + v * math.sin(th) * dt
            th = th + yaw_rate[t] * dt
            v = v + acc[t] * dt
            x, y = nx, ny
            out[t + 1, 0], out[t + 1, 1], out[t + 1, 2], out[t + 1, 3] = x, y, th, v
        return out

    @njit(cache=True)
    def _kmeans_assign_nb(points, centers):
        n = points.shape[0]
        idx = np.empty(n, np.int64)
        dist = np.empty(n)
        for i in range(n):
            best = np.inf
            k = 0
            for j in range(centers.shape[0]):
                d2 = 0.0
                for c in range(points.shape[1]):
                    e = points[i, c] - centers[j, c]
                    d2 += e * e
                if d2 < best:
                    best = d2
                    k = j
            idx[i] = k
            dist[i] = best
        return idx, dist

    @njit(cache=True)
    def _interaction_argmax_nb(cur, prev, valid):
        N, M, T = cur.shape[0], cur.shape[1], cur.shape[2]
        Mp = prev.shape[1]
        jj = np.zeros((N, M, T), np.int64)
        nn = np.zeros((N, M, T), np.int64)
        dd = np.full((N, M, T), np.inf)
        for i in range(N):
            for m in range(M):
                for t in range(T):
                    best = np.inf
                    for j in range(N):
                        if j == i or not (valid[i] and valid[j]):
                            continue
                        for n in range(Mp):
                            dx = cur[i, m, t, 0] - prev[j, n, t, 0]
                            dy = cur[i, m, t, 1] - prev[j, n, t, 1]
                            d = math.sqrt(dx * dx + dy * dy)
                            if d < best:
                                best = d
                                jj[i, m, t] = j
                                nn[i, m, t] = n
                    dd[i, m, t] = best
        return jj, nn, dd


# ---------------------------------------------------------------------------
# dispatch


def boxes_overlap(a, b) -> np.ndarray:
    if not HAVE_NUMBA:
        return boxes_overlap_np(a, b)
    a, b = np.broadcast_arrays(np.asarray(a, np.float64), np.asarray(b, np.float64))
    shape = a.shape[:-1]
    out = _overlap_rows(np.ascontiguousarray(a.reshape(-1, 5)), np.ascontiguousarray(b.reshape(-1, 5)))
    return out.reshape(shape)


def nearest_waypoint(points, route) -> np.ndarray:
    if not HAVE_NUMBA:
        return nearest_waypoint_np(points, route)
    p = np.ascontiguousarray(np.asarray(points, np.float64).reshape(-1, 2))
    r = np.ascontiguousarray(np.asarray(route, np.float64)[:, :2])
    return _nearest_rows(p, r).reshape(np.shape(points)[:-1])


def rollout(x0, y0, theta0, v0, acc, yaw_rate, dt) -> np.ndarray:
    acc = np.ascontiguousarray(acc, np.float64)
    yaw_rate = np.ascontiguousarray(yaw_rate, np.float64)
    if not HAVE_NUMBA:
        return rollout_np(float(x0), float(y0), float(theta0), float(v0), acc, yaw_rate, float(dt))
    return _rollout_nb(float(x0), float(y0), float(theta0), float(v0), acc, yaw_rate, float(dt))


def kmeans_assign(points, centers):
    points = np.ascontiguousarray(points, np.float64)
    centers = np.ascontiguousarray(centers, np.float64)
    if not HAVE_NUMBA:
        return kmeans_assign_np(points, centers)
    return _kmeans_assign_nb(points, centers)


def interaction_argmax(cur, prev, valid):
    cur = np.ascontiguousarray(cur, np.float64)
    prev = np.ascontiguousarray(prev, np.float64)
    valid = np.ascontiguousarray(valid, np.bool_)
    if not HAVE_NUMBA:
        return interaction_argmax_np(cur, prev, valid)
    return _interaction_argmax_nb(cur, prev, valid)
