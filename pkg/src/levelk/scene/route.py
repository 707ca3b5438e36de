"""Arc-length parameterised reference routes from a cubic spline through waypoints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .types import ROUTE_DIM, ROUTE_HEADING, ROUTE_SPEED_LIMIT, ROUTE_STOP


@dataclass
class RouteSpline:
    """Spline through support points, parameterised by cumulative chord length."""
    knots: np.ndarray      # (S,) chord-length parameter of each support
    spline: CubicSpline

    def __call__(self, t, nu: int = 0) -> np.ndarray:
        return self.spline(t, nu)


def fit_spline(supports: np.ndarray) -> RouteSpline:
    supports = np.asarray(supports, np.float64)
    if supports.ndim != 2 or supports.shape[1] != 2:
        raise ValueError(f"supports must be (S, 2), got {supports.shape}")
    if len(supports) < 4:
        raise ValueError(f"need at least 4 support waypoints, got {len(supports)}")
    seg = np.hypot(*np.diff(supports, axis=0).T)
    if np.any(seg <= 1e-9):
        raise ValueError("support waypoints must be distinct consecutive points")
    knots = np.r_[0.0, np.cumsum(seg)]
    return RouteSpline(knots, CubicSpline(knots, supports, axis=0))


def build_reference_route(supports, speed_limit=None, stop=None, length_m: float = 100.0,
                          spacing_m: float = 0.1, oversample: int = 20) -> np.ndarray:
    """Resample the spline through ``supports`` at equal arc-length spacing.

    Returns (length_m / spacing_m, 5) rows of x, y, heading, speed limit, stop
    flag. Speed limits follow the nearest preceding support; each flagged
    support marks exactly one route waypoint (the nearest one). If the supports
    are shorter than ``length_m`` the spline is extended along its end tangent.
    """
    supports = np.asarray(supports, np.float64)
    rs = fit_spline(supports)
    n_out = int(round(length_m / spacing_m))
    speed_limit = np.full(len(supports), 10.0) if speed_limit is None else np.asarray(speed_limit, float)
    stop = np.zeros(len(supports), bool) if stop is None else np.asarray(stop, bool)

    # dense arc-length table over the spline parameter
    t_end = rs.knots[-1]
    t = np.linspace(0.0, t_end, max(2, int(np.ceil(t_end / spacing_m)) * oversample + 1))
    d1 = rs(t, 1)
    speed = np.hypot(d1[:, 0], d1[:, 1])
    arc = np.r_[0.0, np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(t))]
    s_out = np.arange(n_out) * spacing_m
    inside = s_out <= arc[-1]
    t_out = np.interp(s_out[inside], arc, t)
    pts = rs(t_out)
    tan = rs(t_out, 1)
    heading = np.arctan2(tan[:, 1], tan[:, 0])
    if not inside.all():
        # straight extension past the last support
        end, h_end = rs(t_end), np.arctan2(*rs(t_end, 1)[::-1])
        extra = s_out[~inside] - arc[-1]
        ext = end + extra[:, None] * np.array([np.cos(h_end), np.sin(h_end)])
        pts = np.vstack([pts, ext])
        heading = np.r_[heading, np.full(len(extra), h_end)]

    route = np.zeros((n_out, ROUTE_DIM))
    route[:, :2] = pts
    route[:, ROUTE_HEADING] = heading
    knot_s = np.interp(rs.knots, t, arc)
    seg = np.clip(np.searchsorted(knot_s, s_out, side="right") - 1, 0, len(supports) - 1)
    route[:, ROUTE_SPEED_LIMIT] = speed_limit[seg]
    for k in np.flatnonzero(stop):
        if knot_s[k] <= s_out[-1] + spacing_m:
            route[int(np.argmin(np.abs(s_out - knot_s[k]))), ROUTE_STOP] = 1.0
    return route


def route_arclength(route: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(route[:, :2], axis=0).T)
    return np.r_[0.0, np.cumsum(seg)]
