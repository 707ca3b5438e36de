"""Oriented-box overlap for collision accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _accel
from ..scene.types import HEADING, LENGTH, WIDTH, X, Y


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box extents must be positive, got {self.length} x {self.width}")
        if not np.all(np.isfinite(self.as_row())):
            raise ValueError("box has non-finite entries")

    def as_row(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.length, self.width], np.float64)

    def corners(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, s], [-s, c]]) + [self.x, self.y]

    def contains(self, pts) -> np.ndarray:
        d = np.asarray(pts, np.float64) - [self.x, self.y]
        c, s = np.cos(self.heading), np.sin(self.heading)
        lon = d[..., 0] * c + d[..., 1] * s
        lat = -d[..., 0] * s + d[..., 1] * c
        return (np.abs(lon) <= 0.5 * self.length) & (np.abs(lat) <= 0.5 * self.width)


def collision_check(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test; touching boundaries count as overlap."""
    return bool(_accel.boxes_overlap(a.as_row(), b.as_row()))


def track_boxes(tracks: np.ndarray) -> np.ndarray:
    """(..., 11) agent states to (..., 5) box rows."""
    return tracks[..., [X, Y, HEADING, LENGTH, WIDTH]]


def any_overlap(ego_rows: np.ndarray, other_rows: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per step, whether the ego box overlaps any valid other box.

    ego_rows (T, 5), other_rows (J, T, 5), valid (J, T) -> (T,) bool.
    """
    if other_rows.shape[0] == 0:
        return np.zeros(len(ego_rows), bool)
    hit = _accel.boxes_overlap(np.broadcast_to(ego_rows[None], other_rows.shape), other_rows)
    return (hit & valid).any(0)
