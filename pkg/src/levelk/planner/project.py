"""Map trajectories onto an arc-length parameterized reference route."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _accel


@dataclass
class Projection:
    points: np.ndarray     # (T, 2) projected positions
    s: np.ndarray          # (T,) arc length, non-decreasing
    offset: np.ndarray     # (T,) signed lateral offset (left positive)
    clamped: np.ndarray    # (T,) bool, point lay beyond the route end


def route_frenet(points, route):
    """Arc length and signed offset of each point relative to the route polyline."""
    pts = np.asarray(points, np.float64)[..., :2].reshape(-1, 2)
    xy = np.asarray(route, np.float64)[:, :2]
    seg = np.diff(xy, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    s_knots = np.concatenate([[0.0], np.cumsum(seg_len)])
    k = _accel.nearest_waypoint(pts, xy)
    s = np.empty(len(pts))
    off = np.empty(len(pts))
    beyond = np.zeros(len(pts), bool)
    for i, p in enumerate(pts):
        best = None
        # the closest point lies on one of the two segments touching the nearest waypoint
        for j in (k[i] - 1, k[i]):
            if j < 0 or j >= len(seg):
                continue
            d = seg[j]
            t = float((p - xy[j]) @ d) / (seg_len[j] ** 2)
            if j == len(seg) - 1 and t > 1.0:
                beyond[i] = True
            if j == 0 and t < 0.0:
                t_c = t           # allow extrapolation behind the start
            else:
                t_c = min(max(t, 0.0), 1.0)
            foot = xy[j] + t_c * d
            dist = float(np.hypot(*(p - foot)))
            if best is None or dist < best[0]:
                cross = d[0] * (p[1] - xy[j][1]) - d[1] * (p[0] - xy[j][0])
                best = (dist, s_knots[j] + t_c * seg_len[j], np.sign(cross) * dist if cross else 0.0, j)
        s[i], off[i] = best[1], best[2]
        if beyond[i]:
            # perpendicular offset from the end tangent
            d = seg[-1] / seg_len[-1]
            rel = p - xy[-1]
            off[i] = d[0] * rel[1] - d[1] * rel[0]
            s[i] = s_knots[-1]
    return s, off, beyond, s_knots


def point_at(route, s_knots, s, offset=None):
    xy = np.asarray(route, np.float64)[:, :2]
    s = np.asarray(s, np.float64)
    j = np.clip(np.searchsorted(s_knots, s, side="right") - 1, 0, len(xy) - 2)
    seg = xy[j + 1] - xy[j]
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    t = (s - s_knots[j]) / seg_len
    out = xy[j] + t[:, None] * seg
    if offset is not None:
        nrm = np.stack([-seg[:, 1], seg[:, 0]], -1) / seg_len[:, None]
        out = out + np.asarray(offset)[:, None] * nrm
    return out


def project_to_reference(traj, route, keep_offset: bool = True) -> Projection:
    """Project each point to its nearest route arc length, optionally keeping the lateral offset.

    Arc length is forced non-decreasing along the trajectory, and points past
    the route end are clamped to it.
    """
    traj = np.asarray(traj, np.float64)
    s, off, beyond, s_knots = route_frenet(traj, route)
    s = np.maximum.accumulate(s)
    s = np.minimum(s, s_knots[-1])
    pts = point_at(route, s_knots, s, off if keep_offset else None)
    return Projection(pts, s, off if keep_offset else np.zeros_like(off), beyond)
