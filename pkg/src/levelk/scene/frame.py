"""Rigid re-expression of scenarios in another coordinate frame."""
from __future__ import annotations

import numpy as np

from .types import (CROSSWALK_DIM, HEADING, LANE_CENTER, LANE_LEFT, LANE_RIGHT, ROUTE_HEADING,
                    VX, VY, X, Y, Frame, Scenario, wrap_angle)


def _pose_rows(arr: np.ndarray, valid: np.ndarray, cols: slice | tuple, frame: Frame) -> None:
    """In place: map (x, y, heading) columns of valid rows from the parent frame into ``frame``."""
    x0, y0, h0 = frame.x, frame.y, frame.heading
    c, s = np.cos(h0), np.sin(h0)
    i = cols.start if isinstance(cols, slice) else cols[0]
    sub = arr[valid]
    dx, dy = sub[:, i] - x0, sub[:, i + 1] - y0
    sub[:, i] = c * dx + s * dy
    sub[:, i + 1] = -s * dx + c * dy
    sub[:, i + 2] = wrap_angle(sub[:, i + 2] - h0)
    arr[valid] = sub


def _velocity_rows(arr: np.ndarray, valid: np.ndarray, frame: Frame) -> None:
    c, s = np.cos(frame.heading), np.sin(frame.heading)
    sub = arr[valid]
    vx, vy = sub[:, VX].copy(), sub[:, VY].copy()
    sub[:, VX] = c * vx + s * vy
    sub[:, VY] = -s * vx + c * vy
    arr[valid] = sub


def transform(scn: Scenario, frame: Frame) -> Scenario:
    """Express ``scn`` in ``frame`` (a pose given in the scenario's current coordinates).

    Padded entries stay exactly zero.
    """
    tracks = scn.tracks.copy()
    _pose_rows(tracks, scn.valid, (X, Y, HEADING), frame)
    _velocity_rows(tracks, scn.valid, frame)
    lanes = scn.lanes.copy()
    for cols in (LANE_CENTER, LANE_LEFT, LANE_RIGHT):
        _pose_rows(lanes, scn.lane_valid, cols, frame)
    crosswalks = scn.crosswalks.copy()
    _pose_rows(crosswalks, scn.crosswalk_valid, slice(0, CROSSWALK_DIM), frame)
    route = scn.route.copy()
    _pose_rows(route, np.ones(len(route), bool), (0, 1, ROUTE_HEADING), frame)
    sup = np.c_[scn.route_supports, np.zeros(len(scn.route_supports))]
    _pose_rows(sup, np.ones(len(sup), bool), (0, 1, 2), frame)
    return scn.replace(tracks=tracks, lanes=lanes, crosswalks=crosswalks, route=route,
                       route_supports=sup[:, :2].copy(), frame=scn.frame.compose(frame))


def ego_frame(scn: Scenario) -> Frame:
    """The ego agent's current pose, in the scenario's coordinates."""
    cur = scn.current[0]
    return Frame(float(cur[X]), float(cur[Y]), float(cur[HEADING]))


def normalize(scn: Scenario, frame: Frame | None = None) -> Scenario:
    """Re-express in ``frame``, by default the ego's current pose (ego ends at the origin)."""
    if frame is None:
        frame = ego_frame(scn)
    if not np.all(np.isfinite(frame.as_array())):
        raise ValueError(f"non-finite frame {frame}")
    return transform(scn, frame)


def denormalize(scn: Scenario) -> Scenario:
    """Back to world coordinates (undo every normalization applied so far)."""
    return transform(scn, scn.frame.inverse()).replace(frame=Frame())
