"""Synthetic interactive driving scenes.

Three layouts (four-way intersection, on-ramp merge, two-lane road with an ego
lane change). Agents follow fixed paths; their speeds come from a car-following
rule (IDM) plus yielding at path conflicts, decided once by estimated arrival
time. Samples whose logs contain a collision or exceed the kinematic bounds are
redrawn from the same random stream, so the output is a pure function of
(kind, n_agents, seed).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .. import _accel
from .route import build_reference_route
from .types import (CROSSWALK_DIM, CYCLIST, HEADING, HEIGHT, KINDS, LANE_CENTER, LANE_DIM,
                    LANE_LEFT, LANE_LEFT_TYPE, LANE_LIGHT, LANE_RIGHT, LANE_RIGHT_TYPE,
                    LANE_SPEED_LIMIT, LANE_STOP, LANE_TYPE, LENGTH, PEDESTRIAN, STATE_DIM, VEHICLE, VX,
                    VY, WIDTH, X, Y, Scenario, wrap_angle)

CAPACITY = {"intersection": 8, "merge": 6, "lane_change": 6}
SIZES = {VEHICLE: (4.5, 2.0, 1.6), PEDESTRIAN: (0.8, 0.8, 1.8), CYCLIST: (1.8, 0.8, 1.7)}


@dataclass
class GenConfig:
    n_hist: int = 20
    n_fut: int = 80
    dt: float = 0.1
    n_lanes: int = 2
    n_crosswalks: int = 1
    n_points: int = 20
    lane_spacing: float = 2.0
    a_max: float = 4.0            # bound on |longitudinal acceleration|, m/s^2
    yaw_rate_max: float = 1.0     # bound on |yaw rate|, rad/s
    route_length: float = 100.0
    route_spacing: float = 0.1
    max_tries: int = 60


class GenerationError(ValueError):
    pass


@dataclass
class _Path:
    points: np.ndarray
    speed_limit: float = 13.9
    light: int = 0
    stop_s: float | None = None
    width: float = 3.5
    left_type: int = 1
    right_type: int = 2
    lane_type: int = 1
    heading: np.ndarray = field(init=False)
    s: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.points
        self.s = np.r_[0.0, np.cumsum(np.hypot(*np.diff(p, axis=0).T))]
        g = np.gradient(p, self.s, axis=0)
        self.heading = np.unwrap(np.arctan2(g[:, 1], g[:, 0]))

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def at(self, s):
        s = np.asarray(s, np.float64)
        x = np.interp(s, self.s, self.points[:, 0])
        y = np.interp(s, self.s, self.points[:, 1])
        h = np.interp(s, self.s, self.heading)
        over = s > self.s[-1]
        if np.any(over):
            extra = s - self.s[-1]
            x = np.where(over, self.points[-1, 0] + extra * np.cos(self.heading[-1]), x)
            y = np.where(over, self.points[-1, 1] + extra * np.sin(self.heading[-1]), y)
        return x, y, h

    def project(self, xy) -> float:
        d = np.hypot(self.points[:, 0] - xy[0], self.points[:, 1] - xy[1])
        return float(self.s[int(np.argmin(d))])


def _line(p0, p1, step=0.25):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.ceil(np.hypot(*(p1 - p0)) / step)) + 1)
    return p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)


def _chain(*parts):
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.vstack(out)


@dataclass
class _Agent:
    path: _Path
    s0: float
    v0: float
    vdes: float
    category: int = VEHICLE
    map_lane: int | None = None   # index of the agent's own lane in the layout

    @property
    def size(self):
        return SIZES[self.category]


@dataclass
class _Layout:
    lanes: list
    crosswalks: list
    agents: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# layouts


def _intersection(rng, n_agents) -> _Layout:
    mode = str(rng.choice(["none", "ego_green", "ego_red"]))
    ew_light, ns_light = {"none": (0, 0), "ego_green": (1, 3), "ego_red": (3, 1)}[mode]
    E = _Path(_line((-200, -1.75), (200, -1.75)), light=ew_light)
    W = _Path(_line((200, 1.75), (-200, 1.75)), light=ew_light)
    N = _Path(_line((1.75, -200), (1.75, 200)), light=ns_light)
    S = _Path(_line((-1.75, 200), (-1.75, -200)), light=ns_light)
    if ew_light == 3:
        E.stop_s, W.stop_s = 188.0, 188.0
    if ns_light == 3:
        N.stop_s, S.stop_s = 188.0, 188.0
    cw_w = _Path(_line((-8, -6), (-8, 6)), speed_limit=2.0)
    cw_e = _Path(_line((8, 6), (8, -6)), speed_limit=2.0)
    lay = _Layout([E, W, N, S], [cw_w, cw_e], meta={"light_mode": mode})

    v_e = rng.uniform(8.0, 12.0)
    s_e = 200.0 + rng.uniform(-70.0, -45.0)
    lay.agents.append(_Agent(E, s_e, v_e, v_e, map_lane=0))
    eta = (200.0 - s_e) / v_e

    def crossing(idx, lane):
        v = rng.uniform(7.0, 12.0)
        t = max(0.5, eta + rng.uniform(-1.5, 1.5))
        return _Agent(lane, max(0.0, 200.0 - v * t), v, v, map_lane=idx)

    first = int(rng.integers(2))
    cross = [(2, N), (3, S)]
    pool = [
        lambda: crossing(*cross[first]),
        lambda: _Agent(W, rng.uniform(120.0, 200.0), *(2 * [rng.uniform(7.0, 12.0)]), map_lane=1),
        lambda: _pedestrian(rng, cw_w if rng.random() < 0.5 else cw_e),
        lambda: _Agent(E, s_e - rng.uniform(14.0, 25.0), v_e, v_e, map_lane=0),
        lambda: crossing(*cross[1 - first]),
        lambda: _Agent(E, s_e + rng.uniform(20.0, 35.0), *(2 * [rng.uniform(8.0, 12.0)]), map_lane=0),
        lambda: _Agent(W, rng.uniform(200.0, 260.0), *(2 * [rng.uniform(7.0, 12.0)]), map_lane=1),
    ]
    for make in pool[:n_agents - 1]:
        lay.agents.append(make())
    return lay


def _pedestrian(rng, cw: _Path) -> _Agent:
    a, b = cw.points[0], cw.points[-1]
    u = (b - a) / np.hypot(*(b - a))
    path = _Path(_line(a - 4.0 * u, b + 20.0 * u), speed_limit=2.0, lane_type=0)
    v = rng.uniform(1.0, 1.6)
    return _Agent(path, rng.uniform(0.0, 2.0), v, v, category=PEDESTRIAN)


def _merge(rng, n_agents) -> _Layout:
    M0 = _Path(_line((-200, 0), (300, 0)))
    M1 = _Path(_line((-200, 3.5), (300, 3.5)), left_type=2, right_type=1)
    A = 12.0
    xs = np.arange(-120.0, 0.0 + 1e-9, 0.25)
    ramp_curve = np.c_[xs, -A * (1.0 - (xs + 120.0) / 120.0) ** 2]
    ramp_in = _line((-200.0, -A - 0.2 * 80.0), (-120.0, -A))
    R = _Path(_chain(ramp_in, ramp_curve, _line((0, 0), (300, 0))), speed_limit=11.0)
    lay = _Layout([M0, M1, R], [], meta={"ego_on_ramp": bool(rng.random() < 0.5)})
    ego_lane, other_lane = (2, 0) if lay.meta["ego_on_ramp"] else (0, 2)
    paths = {0: M0, 2: R}

    def merge_s(path):
        return path.project((0.0, 0.0))

    v_e = rng.uniform(8.0, 11.0)
    pe = paths[ego_lane]
    s_e = merge_s(pe) - v_e * (2.0 + rng.uniform(3.0, 6.0))
    lay.agents.append(_Agent(pe, s_e, v_e, v_e, map_lane=ego_lane))
    eta = (merge_s(pe) - s_e) / v_e
    po = paths[other_lane]
    v_o = rng.uniform(8.0, 11.0)
    t_o = max(0.5, eta + rng.uniform(-1.5, 1.5))
    pool = [
        lambda: _Agent(po, merge_s(po) - v_o * t_o, v_o, v_o, map_lane=other_lane),
        lambda: _Agent(M1, s_e + rng.uniform(-20.0, 20.0), *(2 * [rng.uniform(9.0, 13.0)]), map_lane=1),
        lambda: _Agent(pe, s_e + rng.uniform(20.0, 30.0), v_e, v_e, map_lane=ego_lane),
        lambda: _Agent(pe, s_e - rng.uniform(15.0, 25.0), v_e, v_e, map_lane=ego_lane),
        lambda: _Agent(M1, s_e + rng.uniform(40.0, 60.0), *(2 * [rng.uniform(9.0, 13.0)]), map_lane=1),
    ]
    for make in pool[:n_agents - 1]:
        lay.agents.append(make())
    return lay


def _lane_change(rng, n_agents) -> _Layout:
    L0 = _Path(_line((-200, 0), (300, 0)))
    L1 = _Path(_line((-200, 3.5), (300, 3.5)), left_type=2, right_type=1)
    cw = _Path(_line((150, -3), (150, 6.5)), speed_limit=2.0)
    x_lc = rng.uniform(-10.0, 20.0)
    span = 50.0
    xs = np.arange(x_lc, x_lc + span + 1e-9, 0.25)
    blend = np.c_[xs, 3.5 * 0.5 * (1.0 - np.cos(np.pi * (xs - x_lc) / span))]
    ego_path = _Path(_chain(_line((-200, 0), (x_lc, 0)), blend, _line((x_lc + span, 3.5), (300, 3.5))))
    lay = _Layout([L0, L1], [cw], meta={"lane_change_x": float(x_lc)})

    v_e = rng.uniform(9.0, 12.0)
    s_e = 200.0 + rng.uniform(-60.0, -45.0)
    lay.agents.append(_Agent(ego_path, s_e, v_e, v_e, map_lane=0))
    slow_cat = CYCLIST if rng.random() < 0.3 else VEHICLE
    v_slow = rng.uniform(4.0, 6.0)
    eta = (200.0 + x_lc + span / 2 - s_e) / v_e
    v_l = rng.uniform(9.0, 13.0)
    t_l = max(0.5, eta + rng.uniform(-1.5, 1.5))
    pool = [
        lambda: _Agent(L1, 200.0 + x_lc + span / 2 - v_l * t_l, v_l, v_l, map_lane=1),
        lambda: _Agent(L0, s_e + rng.uniform(30.0, 45.0), v_slow, v_slow, category=slow_cat, map_lane=0),
        lambda: _Agent(L1, s_e + rng.uniform(70.0, 90.0), *(2 * [rng.uniform(10.0, 13.0)]), map_lane=1),
        lambda: _Agent(L0, s_e - rng.uniform(15.0, 25.0), *(2 * [rng.uniform(8.0, 10.0)]), map_lane=0),
        lambda: _Agent(L1, s_e - rng.uniform(30.0, 45.0), *(2 * [rng.uniform(9.0, 12.0)]), map_lane=1),
    ]
    for make in pool[:n_agents - 1]:
        lay.agents.append(make())
    return lay


_LAYOUTS = {"intersection": _intersection, "merge": _merge, "lane_change": _lane_change}


# ---------------------------------------------------------------------------
# simulation


def _conflicts(agents) -> list[tuple[int, int, float, float]]:
    """(i, j, s_i, s_j): first points ahead of both agents where their paths come within 2 m."""
    out = []
    trees = [cKDTree(a.path.points) for a in agents]
    for i, ai in enumerate(agents):
        for j in range(i + 1, len(agents)):
            aj = agents[j]
            d, idx = trees[j].query(ai.path.points)
            k0 = int(np.searchsorted(ai.path.s, ai.s0))
            if k0 < len(d) and d[min(k0, len(d) - 1)] < 2.0:
                continue  # already sharing a lane: plain car following
            ahead = np.flatnonzero((d < 2.0) & (ai.path.s > ai.s0))
            if not len(ahead):
                continue
            k = ahead[0]
            s_j = float(aj.path.s[idx[k]])
            if s_j <= aj.s0:
                continue
            out.append((i, j, float(ai.path.s[k]), s_j))
    return out


def _idm(v, vdes, gap, dv, a_max=2.0, b=2.0, s0=2.0, headway=1.2):
    s_star = s0 + max(0.0, v * headway + v * dv / (2.0 * np.sqrt(a_max * b)))
    return a_max * (1.0 - (v / max(vdes, 0.1)) ** 4 - (s_star / max(gap, 0.1)) ** 2)


def _simulate(lay: _Layout, steps: int, cfg: GenConfig):
    agents = lay.agents
    n = len(agents)
    s = np.array([a.s0 for a in agents], float)
    v = np.array([a.v0 for a in agents], float)
    L = np.array([a.size[0] for a in agents])
    yield_to = {}
    for i, j, si, sj in _conflicts(agents):
        def eta(k, sk):
            p = agents[k].path
            if p.stop_s is not None and agents[k].s0 < p.stop_s < sk:
                return np.inf
            return (sk - agents[k].s0) / max(agents[k].vdes, 0.1)
        ti, tj = eta(i, si), eta(j, sj)
        if ti == np.inf and tj == np.inf:
            continue
        if ti <= tj:
            yield_to.setdefault(j, []).append((sj, i, si))
        else:
            yield_to.setdefault(i, []).append((si, j, sj))
    cleared = set()
    S = np.zeros((steps, n))
    V = np.zeros((steps, n))
    for t in range(steps):
        S[t], V[t] = s, v
        xy = np.array([a.path.at(s[k])[:2] for k, a in enumerate(agents)])
        acc = np.zeros(n)
        for i, a in enumerate(agents):
            ai = _idm(v[i], a.vdes, 1e9, 0.0)
            # leaders on my path
            for j in range(n):
                if j == i:
                    continue
                d = np.hypot(a.path.points[:, 0] - xy[j, 0], a.path.points[:, 1] - xy[j, 1])
                k = int(np.argmin(d))
                sj = a.path.s[k]
                if d[k] < 1.8 and s[i] < sj < s[i] + 80.0:
                    ai = min(ai, _idm(v[i], a.vdes, sj - s[i] - 0.5 * (L[i] + L[j]), v[i] - v[j]))
            # red light
            if a.path.stop_s is not None and s[i] < a.path.stop_s:
                ai = min(ai, _idm(v[i], a.vdes, a.path.stop_s - s[i] - 0.5 * L[i], v[i]))
            # yielding
            for s_c, j, s_cj in yield_to.get(i, []):
                if (i, j) in cleared:
                    continue
                if s[j] > s_cj + 0.5 * L[j] + 2.0:
                    cleared.add((i, j))
                    continue
                ai = min(ai, _idm(v[i], a.vdes, s_c - s[i] - 0.5 * L[i] - 2.5, v[i]))
            acc[i] = np.clip(ai, -0.9 * cfg.a_max, 2.0)
        s = s + v * cfg.dt
        v = np.maximum(0.0, v + acc * cfg.dt)
    return S, V


def _tracks(lay: _Layout, S: np.ndarray, V: np.ndarray) -> np.ndarray:
    steps, n = S.shape
    out = np.zeros((n, steps, STATE_DIM))
    for k, a in enumerate(lay.agents):
        x, y, h = a.path.at(S[:, k])
        out[k, :, X], out[k, :, Y] = x, y
        out[k, :, HEADING] = wrap_angle(h)
        out[k, :, VX] = V[:, k] * np.cos(h)
        out[k, :, VY] = V[:, k] * np.sin(h)
        out[k, :, LENGTH], out[k, :, WIDTH], out[k, :, HEIGHT] = a.size
        out[k, :, 8 + a.category] = 1.0
    return out


def kinematic_profile(xy: np.ndarray, dt: float):
    """Finite-difference speed, acceleration and yaw rate of a logged path (T, 2).

    Heading is held through displacements below 1e-6 m.
    """
    d = np.diff(xy, axis=0)
    dist = np.hypot(d[:, 0], d[:, 1])
    v = dist / dt
    th = np.arctan2(d[:, 1], d[:, 0])
    for t in range(len(th)):
        if dist[t] < 1e-6:
            th[t] = th[t - 1] if t else 0.0
    acc = np.diff(v) / dt
    yaw = wrap_angle(np.diff(th)) / dt
    return v, acc, yaw


def _boxes(tracks):
    return np.stack([tracks[..., X], tracks[..., Y], tracks[..., HEADING],
                     tracks[..., LENGTH], tracks[..., WIDTH]], -1)


def first_collision(tracks: np.ndarray, valid: np.ndarray):
    """(step, i, j) of the first overlapping pair of logged boxes, or None."""
    n = tracks.shape[0]
    boxes = _boxes(tracks)
    for i in range(n):
        for j in range(i + 1, n):
            both = valid[i] & valid[j]
            hit = _accel.boxes_overlap(boxes[i], boxes[j]) & both
            if hit.any():
                return int(np.argmax(hit)), i, j
    return None


def _check(tracks, cfg: GenConfig) -> str | None:
    if first_collision(tracks, np.ones(tracks.shape[:2], bool)) is not None:
        return "collision"
    for k in range(tracks.shape[0]):
        _, acc, yaw = kinematic_profile(tracks[k, :, :2], cfg.dt)
        if np.abs(acc).max() > cfg.a_max + 1e-6:
            return "acceleration"
        if np.abs(yaw).max() > cfg.yaw_rate_max + 1e-6:
            return "yaw rate"
    return None


# ---------------------------------------------------------------------------
# local maps and route


def _lane_rows(path: _Path, s_from: float, cfg: GenConfig):
    rows = np.zeros((cfg.n_points, LANE_DIM))
    ok = np.zeros(cfg.n_points, bool)
    sk = s_from + cfg.lane_spacing * np.arange(cfg.n_points)
    ok[:] = sk <= path.length
    x, y, h = path.at(sk)
    nx, ny = -np.sin(h), np.cos(h)
    hw = 0.5 * path.width
    rows[:, LANE_CENTER] = np.c_[x, y, wrap_angle(h)]
    rows[:, LANE_LEFT] = np.c_[x + hw * nx, y + hw * ny, wrap_angle(h)]
    rows[:, LANE_RIGHT] = np.c_[x - hw * nx, y - hw * ny, wrap_angle(h)]
    rows[:, LANE_SPEED_LIMIT] = path.speed_limit
    rows[:, LANE_LEFT_TYPE] = path.left_type
    rows[:, LANE_RIGHT_TYPE] = path.right_type
    rows[:, LANE_TYPE] = path.lane_type
    rows[:, LANE_LIGHT] = path.light
    if path.stop_s is not None:
        near = np.flatnonzero(np.abs(sk - path.stop_s) <= 0.5 * cfg.lane_spacing)
        if len(near):
            rows[near[0], LANE_STOP] = 1.0
    rows[~ok] = 0.0
    return rows, ok


def _local_maps(lay: _Layout, cur: np.ndarray, cfg: GenConfig):
    n = len(lay.agents)
    lanes = np.zeros((n, cfg.n_lanes, cfg.n_points, LANE_DIM))
    lane_ok = np.zeros((n, cfg.n_lanes, cfg.n_points), bool)
    cws = np.zeros((n, cfg.n_crosswalks, cfg.n_points, CROSSWALK_DIM))
    cw_ok = np.zeros((n, cfg.n_crosswalks, cfg.n_points), bool)
    for k, a in enumerate(lay.agents):
        p = cur[k, :2]
        dist = [float(np.min(np.hypot(*(lane.points - p).T))) for lane in lay.lanes]
        order = sorted(range(len(lay.lanes)), key=lambda i: (i != a.map_lane, dist[i], i))
        for slot, li in enumerate(order[:cfg.n_lanes]):
            lane = lay.lanes[li]
            lanes[k, slot], lane_ok[k, slot] = _lane_rows(lane, lane.project(p), cfg)
        cw_order = sorted(range(len(lay.crosswalks)),
                          key=lambda i: (float(np.min(np.hypot(*(lay.crosswalks[i].points - p).T))), i))
        for slot, ci in enumerate(cw_order[:cfg.n_crosswalks]):
            cw = lay.crosswalks[ci]
            sk = np.linspace(0.0, cw.length, cfg.n_points)
            x, y, h = cw.at(sk)
            cws[k, slot] = np.c_[x, y, wrap_angle(h)]
            cw_ok[k, slot] = True
    return lanes, lane_ok, cws, cw_ok


def _route_for(ego: _Agent, s_cur: float, cfg: GenConfig):
    path = ego.path
    s_sup = list(np.arange(s_cur, s_cur + cfg.route_length + 10.0, 5.0))
    if path.stop_s is not None and s_cur < path.stop_s < s_sup[-1]:
        s_sup = [x for x in s_sup if abs(x - path.stop_s) > 0.5] + [path.stop_s]
        s_sup.sort()
    s_sup = np.array(s_sup)
    x, y, _ = path.at(s_sup)
    supports = np.c_[x, y]
    stop = np.zeros(len(s_sup), bool)
    if path.stop_s is not None:
        stop = np.isclose(s_sup, path.stop_s)
    limits = np.full(len(s_sup), path.speed_limit)
    route = build_reference_route(supports, limits, stop, cfg.route_length, cfg.route_spacing)
    return route, supports


# ---------------------------------------------------------------------------


def generate_scenario(kind: str, n_agents: int, seed: int, cfg: GenConfig | None = None) -> Scenario:
    """Deterministic synthetic scenario in world coordinates; agent 0 is the ego."""
    cfg = cfg or GenConfig()
    if kind not in KINDS:
        raise GenerationError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    if n_agents < 2:
        raise GenerationError(f"n_agents must be >= 2, got {n_agents}")
    if n_agents > CAPACITY[kind]:
        raise GenerationError(f"{kind} layout holds at most {CAPACITY[kind]} agents, got {n_agents}")
    rng = np.random.default_rng([int(seed), KINDS.index(kind), int(n_agents)])
    steps = cfg.n_hist + 1 + cfg.n_fut
    reasons = []
    for attempt in range(cfg.max_tries):
        lay = _LAYOUTS[kind](rng, n_agents)
        S, V = _simulate(lay, steps, cfg)
        tracks = _tracks(lay, S, V)
        why = _check(tracks, cfg)
        if why is None:
            break
        reasons.append(why)
    else:
        raise GenerationError(f"no valid {kind} sample in {cfg.max_tries} tries ({reasons[-3:]})")
    cur = tracks[:, cfg.n_hist]
    lanes, lane_ok, cws, cw_ok = _local_maps(lay, cur, cfg)
    route, supports = _route_for(lay.agents[0], float(S[cfg.n_hist, 0]), cfg)
    meta = dict(lay.meta, attempt=attempt, interaction_pair=[0, 1])
    return Scenario(kind=kind, seed=int(seed), dt=cfg.dt, n_hist=cfg.n_hist, tracks=tracks,
                    valid=np.ones(tracks.shape[:2], bool), lanes=lanes, lane_valid=lane_ok,
                    crosswalks=cws, crosswalk_valid=cw_ok, route=route, route_supports=supports,
                    meta=meta)


def ego_displacement(scn: Scenario) -> float:
    fut = scn.tracks[0, scn.n_hist:, :2]
    return float(np.hypot(*(fut[-1] - fut[0])))


def generate_corpus(n: int, seed: int, n_agents: int = 4, kinds=KINDS, cfg: GenConfig | None = None,
                    min_ego_motion: float = 5.0) -> list[Scenario]:
    """``n`` scenarios cycling through ``kinds``; near-static ego samples are skipped."""
    out = []
    k = 0
    while len(out) < n:
        kind = kinds[k % len(kinds)]
        scn = generate_scenario(kind, n_agents, seed * 100003 + k, cfg)
        k += 1
        if ego_displacement(scn) >= min_ego_motion:
            out.append(scn)
        if k > 20 * n + 100:
            raise GenerationError("too many near-static ego samples")
    return out
