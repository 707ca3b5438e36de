"""Discrete unicycle model: inverse (positions to controls) and forward (controls to states)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _accel
from .. import diffkit as dk
from ..scene.types import wrap_angle

HOLD_EPS = 1e-6     # displacements shorter than this keep the previous heading


@dataclass
class EgoDynamicState:
    x: float
    y: float
    theta: float
    v: float

    def __post_init__(self):
        vals = np.array([self.x, self.y, self.theta, self.v], dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite ego state {vals}")
        self.theta = float(wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    @classmethod
    def from_array(cls, a) -> "EgoDynamicState":
        return cls(*(float(v) for v in a[:4]))


@dataclass
class ControlSequence:
    """Per-step acceleration and yaw rate, plus the start speed/heading they were derived from."""
    acc: np.ndarray
    yaw_rate: np.ndarray
    dt: float = 0.1
    v0: float = 0.0
    theta0: float = 0.0

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=np.float64)
        self.yaw_rate = np.asarray(self.yaw_rate, dtype=np.float64)
        if self.acc.shape != self.yaw_rate.shape or self.acc.ndim != 1:
            raise ValueError(f"acc and yaw_rate must be equal-length vectors, got "
                             f"{self.acc.shape} and {self.yaw_rate.shape}")
        if not (np.all(np.isfinite(self.acc)) and np.all(np.isfinite(self.yaw_rate))):
            raise ValueError("control sequence has non-finite entries")

    def __len__(self):
        return len(self.acc)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.acc, self.yaw_rate])

    @classmethod
    def from_vector(cls, u, dt=0.1, v0=0.0, theta0=0.0) -> "ControlSequence":
        u = np.asarray(u, dtype=np.float64)
        T = len(u) // 2
        return cls(u[:T].copy(), u[T:].copy(), dt, v0, theta0)


def headings(traj: np.ndarray, theta_init: float | None = None) -> np.ndarray:
    """Heading of each displacement; short displacements hold the previous one."""
    d = np.diff(np.asarray(traj, np.float64)[:, :2], axis=0)
    raw = np.arctan2(d[:, 1], d[:, 0])
    moving = np.hypot(d[:, 0], d[:, 1]) >= HOLD_EPS
    out = np.empty(len(d))
    prev = 0.0 if theta_init is None else float(theta_init)
    for t in range(len(d)):
        prev = raw[t] if moving[t] else prev
        out[t] = prev
    return out


def inverse_dynamics(traj, dt: float = 0.1, theta_init: float | None = None) -> ControlSequence:
    """Controls that reproduce ``traj`` (T+1 positions) under :func:`forward_dynamics`.

    The last control has no successor state and is zero.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or len(traj) < 2 or not np.all(np.isfinite(traj[:, :2])):
        raise ValueError(f"need a finite (T+1, 2) position array, got shape {traj.shape}")
    d = np.diff(traj[:, :2], axis=0)
    v = np.hypot(d[:, 0], d[:, 1]) / dt
    th = headings(traj, theta_init)
    acc = np.zeros(len(v))
    yaw = np.zeros(len(v))
    acc[:-1] = np.diff(v) / dt
    yaw[:-1] = wrap_angle(np.diff(th)) / dt
    return ControlSequence(acc, yaw, dt, float(v[0]), float(th[0]))


def initial_state(traj, u: ControlSequence) -> EgoDynamicState:
    p = np.asarray(traj)[0]
    return EgoDynamicState(float(p[0]), float(p[1]), u.theta0, u.v0)


def forward_dynamics(x0: EgoDynamicState, u: ControlSequence) -> np.ndarray:
    """Euler rollout; returns (T+1, 4) rows of x, y, heading, speed (heading unwrapped)."""
    return _accel.rollout(float(x0.x), float(x0.y), float(x0.theta), float(x0.v),
                          u.acc, u.yaw_rate, float(u.dt))


def _lower(T: int, strict: bool) -> np.ndarray:
    return np.tril(np.ones((T, T)), -1 if strict else 0)


def rollout_tensor(state, acc, yaw_rate, dt: float):
    """Differentiable rollout for batched controls.

    state: (B, 4) array of x, y, heading, speed; acc, yaw_rate: Tensors (B, T).
    Returns (x, y, theta, v) Tensors of shape (B, T) for steps 1..T, plus
    the pre-update speed/heading (B, T) used in each position update.
    """
    state = np.asarray(state, np.float64)
    T = acc.shape[-1]
    L = _lower(T, strict=False)
    v0 = state[:, 3:4]
    th0 = state[:, 2:3]
    v = dk.add(v0, dk.mul(dt, dk.matmul(acc, L.T)))          # v_1..v_T
    th = dk.add(th0, dk.mul(dt, dk.matmul(yaw_rate, L.T)))
    v_pre = dk.concat([dk.as_tensor(v0, np.float64), v[:, :-1]], axis=1)   # v_0..v_{T-1}
    th_pre = dk.concat([dk.as_tensor(th0, np.float64), th[:, :-1]], axis=1)
    x = dk.add(state[:, 0:1], dk.mul(dt, dk.matmul(dk.mul(v_pre, dk.cos(th_pre)), L.T)))
    y = dk.add(state[:, 1:2], dk.mul(dt, dk.matmul(dk.mul(v_pre, dk.sin(th_pre)), L.T)))
    return x, y, th, v, v_pre, th_pre
