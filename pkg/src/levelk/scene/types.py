"""Scenario data model.

Everything is stored as dense arrays. Per-step agent rows use the layout
(x, y, heading, vx, vy, length, width, height, vehicle, pedestrian, cyclist).
Invalid rows are all zeros.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

X, Y, HEADING, VX, VY, LENGTH, WIDTH, HEIGHT = range(8)
CATEGORY = slice(8, 11)
STATE_DIM = 11

VEHICLE, PEDESTRIAN, CYCLIST = 0, 1, 2
CATEGORY_NAMES = ("vehicle", "pedestrian", "cyclist")

# lane waypoint layout (15 attributes)
LANE_CENTER = slice(0, 3)     # x, y, heading
LANE_LEFT = slice(3, 6)
LANE_RIGHT = slice(6, 9)
LANE_SPEED_LIMIT = 9
LANE_LEFT_TYPE = 10           # 0 none, 1 dashed, 2 solid
LANE_RIGHT_TYPE = 11
LANE_TYPE = 12                # 1 vehicle lane, 2 bike lane
LANE_LIGHT = 13               # 0 none, 1 green, 2 yellow, 3 red
LANE_STOP = 14
LANE_DIM = 15
CROSSWALK_DIM = 3             # x, y, heading

# route layout
ROUTE_X, ROUTE_Y, ROUTE_HEADING, ROUTE_SPEED_LIMIT, ROUTE_STOP = range(5)
ROUTE_DIM = 5

KINDS = ("intersection", "merge", "lane_change")


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


@dataclass(frozen=True)
class Frame:
    """Pose (x, y, heading) of a local coordinate frame in world coordinates."""
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading], dtype=np.float64)

    def compose(self, inner: "Frame") -> "Frame":
        """Pose of ``inner`` (given in this frame) expressed in world coordinates."""
        c, s = np.cos(self.heading), np.sin(self.heading)
        return Frame(self.x + c * inner.x - s * inner.y,
                     self.y + s * inner.x + c * inner.y,
                     float(wrap_angle(self.heading + inner.heading)))

    def inverse(self) -> "Frame":
        c, s = np.cos(self.heading), np.sin(self.heading)
        return Frame(-(c * self.x + s * self.y), s * self.x - c * self.y, float(wrap_angle(-self.heading)))


@dataclass
class Scenario:
    kind: str
    seed: int
    dt: float
    n_hist: int                   # past steps, the current step is index n_hist
    tracks: np.ndarray            # (N, n_hist + 1 + n_fut, 11)
    valid: np.ndarray             # (N, T) bool
    lanes: np.ndarray             # (N, NL, Np, 15)
    lane_valid: np.ndarray        # (N, NL, Np) bool
    crosswalks: np.ndarray        # (N, NC, Np, 3)
    crosswalk_valid: np.ndarray   # (N, NC, Np) bool
    route: np.ndarray             # (R, 5)
    route_supports: np.ndarray    # (S, 2) spline knots the route was built from
    frame: Frame = field(default_factory=Frame)
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.tracks.shape[0]

    @property
    def n_fut(self) -> int:
        return self.tracks.shape[1] - self.n_hist - 1

    @property
    def current(self) -> np.ndarray:
        return self.tracks[:, self.n_hist]

    def history(self, steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Past states (N, steps + 1, 11) ending at the current step, with validity."""
        steps = self.n_hist if steps is None else steps
        if steps > self.n_hist:
            raise ValueError(f"history of {steps} steps requested, scenario has {self.n_hist}")
        sl = slice(self.n_hist - steps, self.n_hist + 1)
        return self.tracks[:, sl], self.valid[:, sl]

    def future(self, steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        steps = self.n_fut if steps is None else steps
        if steps > self.n_fut:
            raise ValueError(f"future of {steps} steps requested, scenario has {self.n_fut}")
        sl = slice(self.n_hist + 1, self.n_hist + 1 + steps)
        return self.tracks[:, sl], self.valid[:, sl]

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def array_fields(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}

    def equals(self, other: "Scenario") -> bool:
        if (self.kind, self.seed, self.dt, self.n_hist, self.frame, self.meta) != (
                other.kind, other.seed, other.dt, other.n_hist, other.frame, other.meta):
            return False
        mine, theirs = self.array_fields(), other.array_fields()
        return all(mine[k].dtype == theirs[k].dtype and np.array_equal(mine[k], theirs[k])
                   for k in mine)
