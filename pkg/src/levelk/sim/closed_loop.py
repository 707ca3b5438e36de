"""Log-replay closed-loop simulation: the ego replans every step, everyone else follows the log."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from ..features import make_batch
from ..planner.cost import PlannerConfig
from ..planner.dynamics import ControlSequence, EgoDynamicState, forward_dynamics, headings
from ..planner.project import project_to_reference, route_frenet
from ..planner.refine import refine_plan
from ..scene.frame import ego_frame, normalize
from ..scene.types import HEADING, LENGTH, VX, VY, WIDTH, X, Y, Frame, Scenario, wrap_angle
from .collision import any_overlap, track_boxes

ERROR_TIMES_S = (3.0, 5.0, 8.0)


@dataclass
class ClosedLoopReport:
    success: int
    collided: bool
    off_route: bool
    failed: bool
    progress: float
    mean_abs_acc: float
    mean_abs_jerk: float
    mean_abs_lat_acc: float
    pos_err_3s: float
    pos_err_5s: float
    pos_err_8s: float
    steps: int
    reason: str = ""


@dataclass
class Rollout:
    times: np.ndarray          # (S + 1,)
    states: np.ndarray         # (S + 1, 4) x, y, heading, speed
    controls: np.ndarray       # (S, 2) executed acceleration, yaw rate
    plan_heads: np.ndarray     # (S, 2) first point of each plan
    plan_times: np.ndarray     # (S,) time each plan was made

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "x", "y", "heading", "speed", "acc", "yaw_rate", "plan_x", "plan_y"])
            S = len(self.controls)
            for i in range(S + 1):
                ctl = self.controls[i] if i < S else (np.nan, np.nan)
                ph = self.plan_heads[i] if i < S else (np.nan, np.nan)
                wr.writerow([repr(float(v)) for v in (self.times[i], *self.states[i], *ctl, *ph)])


@dataclass
class Observation:
    """What a policy sees at one replanning instant (scenario coordinates)."""
    step: int                  # steps since the episode start
    time: float
    ego: EgoDynamicState
    ego_history: np.ndarray    # (step + 1, 4) executed states so far
    scenario: Scenario         # the logged scenario the episode replays
    horizon: int = 50


def start_state(scn: Scenario) -> EgoDynamicState:
    """Position at the current step; speed and heading from the first logged displacement."""
    p0 = scn.current[0, [X, Y]]
    p1 = scn.tracks[0, scn.n_hist + 1, [X, Y]]
    th = headings(np.vstack([p0, p1]), theta_init=scn.current[0, HEADING])[0]
    return EgoDynamicState(float(p0[0]), float(p0[1]), float(th), float(np.hypot(*(p1 - p0)) / scn.dt))


def replay_policy(obs: Observation) -> np.ndarray:
    """The logged ego future from the current instant (held at the end of the log)."""
    scn = obs.scenario
    idx = scn.n_hist + obs.step + 1 + np.arange(obs.horizon)
    idx = np.minimum(idx, scn.tracks.shape[1] - 1)
    return scn.tracks[0, idx][:, [X, Y]].astype(np.float64)


def brake_policy(obs: Observation) -> np.ndarray:
    """Stay where you are."""
    return np.tile([obs.ego.x, obs.ego.y], (obs.horizon, 1))


def _shifted_scenario(scn: Scenario, hist: np.ndarray, step: int, fut_steps: int) -> Scenario:
    """The log as seen ``step`` steps later, with the ego's executed states written in."""
    T = scn.tracks.shape[1]
    need = scn.n_hist + step + 1 + fut_steps
    tracks = scn.tracks.copy()
    valid = scn.valid.copy()
    if need > T:
        tracks = np.concatenate([tracks, np.zeros((scn.n_agents, need - T, tracks.shape[2]))], 1)
        valid = np.concatenate([valid, np.zeros((scn.n_agents, need - T), bool)], 1)
    rows = slice(scn.n_hist, scn.n_hist + step + 1)
    th, v = hist[:, 2], hist[:, 3]
    tracks[0, rows, X] = hist[:, 0]
    tracks[0, rows, Y] = hist[:, 1]
    tracks[0, rows, HEADING] = wrap_angle(th)
    tracks[0, rows, VX] = v * np.cos(th)
    tracks[0, rows, VY] = v * np.sin(th)
    # the ego's logged future is not observable
    tracks[0, scn.n_hist + step + 1:] = 0.0
    valid[0, scn.n_hist + step + 1:] = False
    return scn.replace(tracks=tracks, valid=valid, n_hist=scn.n_hist + step)


def _to_world(frame: Frame, pts: np.ndarray) -> np.ndarray:
    c, s = np.cos(frame.heading), np.sin(frame.heading)
    return np.column_stack([frame.x + c * pts[:, 0] - s * pts[:, 1],
                            frame.y + s * pts[:, 0] + c * pts[:, 1]])


def model_closed_loop_policy(model, levels: int | None = None, refine: bool = False,
                             planner_cfg: PlannerConfig | None = None, project: bool = False):
    """Plan with the model's final-level most-likely ego mode, optionally refined and projected."""
    mc = model.cfg

    def policy(obs: Observation) -> np.ndarray:
        scn = _shifted_scenario(obs.scenario, obs.ego_history, obs.step, mc.fut_steps)
        pose = ego_frame(scn)
        local = normalize(scn, pose)
        batch = make_batch([local], mc.n_agents, mc.hist_steps, mc.fut_steps, already_normalized=True)
        pick, _ = model.most_likely(batch, levels)
        plan = pick[0, 0]
        if refine:
            cfg = planner_cfg or PlannerConfig(horizon=mc.fut_steps)
            ego = obs.ego
            # ego state in the local frame: origin, heading relative to the frame
            st = EgoDynamicState(0.0, 0.0, float(wrap_angle(ego.theta - pose.heading)), ego.v)
            pv = np.repeat(batch.agent_valid[0, 1:, None], cfg.horizon, 1)
            plan = refine_plan(plan[:cfg.horizon], st, local.route, pick[0, 1:, :cfg.horizon], pv, cfg).traj
        if project:
            plan = project_to_reference(plan, local.route).points
        return _to_world(pose, plan)

    return policy


def _interp_error(times, states, log_xy, log_t, at):
    if at > times[-1] + 1e-9 or at > log_t[-1] + 1e-9:
        return float("nan")
    x = np.interp(at, times, states[:, 0])
    y = np.interp(at, times, states[:, 1])
    lx = np.interp(at, log_t, log_xy[:, 0])
    ly = np.interp(at, log_t, log_xy[:, 1])
    return float(np.hypot(x - lx, y - ly))


def run_closed_loop(policy, scenario: Scenario, horizon_s: float = 8.0, replan_dt: float = 0.1,
                    off_route_m: float = 5.0, plan_steps: int = 50):
    """Roll the ego forward under ``policy`` while other agents replay their logs.

    Every ``replan_dt`` the policy returns planned positions for the next
    steps; the controls that realize the plan's first step are applied
    through the kinematic model. The speed carried in the state is the one
    the previous plan committed to for the coming step, which is what makes
    a replayed log reproduce exactly. Returns (Rollout, ClosedLoopReport).
    """
    scn = scenario
    dt = scn.dt
    ratio = replan_dt / dt
    n_exec = int(round(ratio))
    if n_exec < 1 or abs(ratio - n_exec) > 1e-9:
        raise ValueError(f"replan interval {replan_dt} must be a whole number of {dt} s steps")
    S = min(int(round(horizon_s / dt)), scn.n_fut)
    ego = start_state(scn)
    states = [ego.as_array()]
    controls, plan_heads, plan_times = [], [], []
    log_xy = scn.tracks[0][scn.n_hist:][:, [X, Y]].astype(np.float64)
    log_t = np.arange(len(log_xy)) * dt
    others = scn.tracks[1:, scn.n_hist:]
    others_valid = scn.valid[1:, scn.n_hist:]
    ego_dims = scn.current[0, [LENGTH, WIDTH]]
    collided = off_route = failed = False
    reason = ""
    step = 0
    while step < S:
        # headings in ``states`` are unwrapped; the observation carries the wrapped value
        obs = Observation(step, step * dt, EgoDynamicState.from_array(states[-1]),
                          np.array(states), scn, plan_steps)
        try:
            plan = np.asarray(policy(obs), np.float64)
            if plan.ndim != 2 or len(plan) < n_exec + 1 or not np.all(np.isfinite(plan[:, :2])):
                raise ValueError(f"policy returned an unusable plan of shape {plan.shape}")
        except Exception as exc:       # a broken policy fails the episode, not the harness
            failed, reason = True, f"policy failure: {exc}"
            break
        cur = states[-1]
        full = np.vstack([cur[None, :2], plan[:, :2]])
        # planned speed/heading one step ahead become the next state's values
        v_next = np.hypot(*(full[2:n_exec + 2] - full[1:n_exec + 1]).T) / dt
        th_plan = headings(full, theta_init=cur[2])
        acc = np.empty(n_exec)
        yaw = np.empty(n_exec)
        v_prev, th_prev = cur[3], cur[2]
        for j in range(n_exec):
            acc[j] = (v_next[j] - v_prev) / dt
            yaw[j] = wrap_angle(th_plan[j + 1] - th_prev) / dt
            v_prev = v_next[j]
            th_prev = th_prev + yaw[j] * dt
        seq = ControlSequence(acc, yaw, dt)
        roll = forward_dynamics(EgoDynamicState(cur[0], cur[1], cur[2], cur[3]), seq)
        roll[:, 2] = cur[2] + np.concatenate([[0.0], np.cumsum(yaw * dt)])
        for j in range(n_exec):
            if step >= S:
                break
            row = roll[j + 1].copy()
            if row[3] < 0.0:
                # no reversing: clamp speed and the control that produced it
                acc[j] = (0.0 - states[-1][3]) / dt
                row[3] = 0.0
            states.append(row)
            controls.append((acc[j], yaw[j]))
            plan_heads.append(plan[j, :2])
            plan_times.append(obs.time)
            step += 1
            ego_row = np.array([[row[0], row[1], row[2], ego_dims[0], ego_dims[1]]])
            if any_overlap(ego_row, track_boxes(others[:, step:step + 1]), others_valid[:, step:step + 1]).any():
                collided, reason = True, f"collision at t={step * dt:.1f}s"
                break
            _, off, _, _ = route_frenet(row[None, :2], scn.route)
            if abs(off[0]) > off_route_m:
                off_route, reason = True, f"off route at t={step * dt:.1f}s ({off[0]:.2f} m)"
                break
        if collided or off_route:
            break

    states = np.array(states)
    times = np.arange(len(states)) * dt
    rollout = Rollout(times, states, np.array(controls).reshape(-1, 2),
                      np.array(plan_heads).reshape(-1, 2), np.array(plan_times))
    v = states[:, 3]
    acc = np.diff(v) / dt
    jerk = np.diff(acc) / dt
    yaw_rate = np.diff(states[:, 2]) / dt
    lat = v[:-1] * yaw_rate
    proj = project_to_reference(states[:, :2], scn.route)
    progress = float(proj.s[-1] - proj.s[0])
    mean_abs = lambda a: float(np.abs(a).mean()) if len(a) else 0.0
    errs = [_interp_error(times, states, log_xy, log_t, t) for t in ERROR_TIMES_S]
    success = int(not (collided or off_route or failed))
    report = ClosedLoopReport(success, collided, off_route, failed, progress, mean_abs(acc),
                              mean_abs(jerk), mean_abs(lat), *errs, steps=len(states) - 1, reason=reason)
    return rollout, report


def write_reports(reports: list, path, summary_path=None) -> dict:
    rows = [vars(r) for r in reports]
    with open(path, "w", newline="") as fh:
        if rows:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    summ = {"episodes": len(rows)}
    for key in ("success", "progress", "mean_abs_acc", "mean_abs_jerk", "mean_abs_lat_acc",
                "pos_err_3s", "pos_err_5s", "pos_err_8s"):
        vals = np.array([r[key] for r in rows], np.float64)
        vals = vals[np.isfinite(vals)]
        summ[key] = float(vals.mean()) if len(vals) else float("nan")
    if summary_path is not None:
        with open(summary_path, "w") as fh:
            json.dump(summ, fh, indent=2, sort_keys=True)
    return summ
