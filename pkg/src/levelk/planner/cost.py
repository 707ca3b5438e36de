"""Weighted residual stack for ego trajectory refinement, with its analytic Jacobian.

Everything is assembled from diffkit ops, so the same code serves plain
solves (under ``no_grad``) and weight learning, where gradients flow
through both the residuals and the Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _accel
from .. import diffkit as dk
from ..scene.types import ROUTE_HEADING, ROUTE_SPEED_LIMIT, ROUTE_STOP, ROUTE_X, ROUTE_Y
from .dynamics import EgoDynamicState, rollout_tensor

TERMS = ("speed", "acceleration", "yaw_rate", "jerk", "yaw_rate_change",
         "lateral", "heading", "stop", "safety")

DEFAULT_WEIGHTS = {
    "speed": 1.0,
    "acceleration": 0.1,
    "yaw_rate": 0.5,
    "jerk": 0.05,
    "yaw_rate_change": 0.05,
    "lateral": 1.0,
    "heading": 1.0,
    "stop": 5.0,
    "safety": 10.0,
}


@dataclass
class PlannerConfig:
    horizon: int = 50
    dt: float = 0.1
    d_safe: float = 3.0
    stop_ramp: float = 15.0
    max_iter: int = 30
    step: float = 0.3
    damping: float = 1e-8
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def validate(self) -> "PlannerConfig":
        unknown = set(self.weights) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown cost terms {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("cost weights must be non-negative")
        if self.horizon < 2 or self.dt <= 0 or self.d_safe <= 0 or self.max_iter < 1:
            raise ValueError("planner horizon, dt, d_safe and max_iter must be positive")
        return self

    def weight_vector(self) -> np.ndarray:
        return np.array([self.weights.get(t, DEFAULT_WEIGHTS[t]) for t in TERMS], np.float64)

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown planner config keys {sorted(bad)}")
        d = dict(d)
        if "weights" in d:
            d["weights"] = {**DEFAULT_WEIGHTS, **d["weights"]}
        return cls(**d).validate()


class RouteTable:
    """Per-waypoint quantities the residuals look up by nearest index."""

    def __init__(self, route: np.ndarray, stop_ramp: float = 15.0):
        route = np.asarray(route, np.float64)
        self.xy = np.ascontiguousarray(route[:, [ROUTE_X, ROUTE_Y]])
        self.heading = route[:, ROUTE_HEADING]
        self.normal = np.stack([-np.sin(self.heading), np.cos(self.heading)], -1)
        seg = np.hypot(*np.diff(self.xy, axis=0).T)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        limit = route[:, ROUTE_SPEED_LIMIT]
        stops = np.flatnonzero(route[:, ROUTE_STOP] > 0.5)
        gap = np.full(len(route), np.inf)
        for k in stops[::-1]:
            ahead = self.s <= self.s[k]
            gap[ahead] = np.minimum(gap[ahead], self.s[k] - self.s[ahead])
        self.ramp = gap < stop_ramp
        self.v_allow = np.where(self.ramp, limit * np.clip(gap / stop_ramp, 0.0, 1.0), limit)
        self.limit = limit

    def nearest(self, xy: np.ndarray) -> np.ndarray:
        return _accel.nearest_waypoint(xy, self.xy)


def _sqrt_weights(weights):
    if isinstance(weights, dk.Tensor):
        return dk.sqrt(weights)
    if isinstance(weights, dict):
        weights = [weights.get(t, DEFAULT_WEIGHTS[t]) for t in TERMS]
    w = np.asarray(weights, np.float64)
    if w.shape != (len(TERMS),) or np.any(w < 0):
        raise ValueError(f"need {len(TERMS)} non-negative weights, got {w}")
    return dk.Tensor(np.sqrt(w), dtype=np.float64)


class PlannerCost:
    """Residual terms bound to a batch of scene contexts.

    state (B, 4) rows of x, y, heading, speed; routes: one (R, 5) route per
    batch row; predictions (B, J, T, 2) mean positions of other agents with
    optional validity (B, J, T).
    """

    def __init__(self, state, routes, predictions=None, pred_valid=None, cfg: PlannerConfig | None = None):
        self.cfg = cfg or PlannerConfig()
        if isinstance(state, EgoDynamicState):
            state = state.as_array()[None]
        self.state = np.atleast_2d(np.asarray(state, np.float64))
        B, T = len(self.state), self.cfg.horizon
        if not isinstance(routes, (list, tuple)):
            routes = np.asarray(routes)
            routes = [routes] * B if routes.ndim == 2 else list(routes)
        if len(routes) != B:
            raise ValueError(f"{len(routes)} routes for {B} states")
        self.routes = [RouteTable(r, self.cfg.stop_ramp) for r in routes]
        if predictions is None:
            predictions = np.zeros((B, 0, T, 2))
        predictions = np.asarray(predictions, np.float64)
        if predictions.ndim == 3:
            predictions = np.broadcast_to(predictions[None], (B,) + predictions.shape)
        if predictions.shape[0] != B or predictions.shape[2] != T:
            raise ValueError(f"predictions {predictions.shape} do not cover a batch of {B} "
                             f"over horizon {T}")
        self.pred = predictions
        self.pred_valid = (np.ones(predictions.shape[:3], bool) if pred_valid is None
                           else np.broadcast_to(np.asarray(pred_valid, bool), predictions.shape[:3]))
        self._L = np.tril(np.ones((T, T)))
        self._S = np.tril(np.ones((T, T)), -1)
        D = np.zeros((T - 1, T))
        D[np.arange(T - 1), np.arange(T - 1)] = -1.0
        D[np.arange(T - 1), np.arange(1, T)] = 1.0
        self._D = D

    @property
    def batch(self) -> int:
        return len(self.state)

    def term_sizes(self) -> dict:
        T, J = self.cfg.horizon, self.pred.shape[1]
        return {"speed": T, "acceleration": T, "yaw_rate": T, "jerk": T - 1, "yaw_rate_change": T - 1,
                "lateral": T, "heading": T, "stop": T, "safety": J * T}

    def term_slices(self) -> dict:
        out, start = {}, 0
        for name, n in self.term_sizes().items():
            out[name] = slice(start, start + n)
            start += n
        return out

    def _check_u(self, u):
        T = self.cfg.horizon
        if u.ndim == 1:
            u = dk.reshape(u, (1, -1))
        if u.shape != (self.batch, 2 * T):
            raise ValueError(f"controls {u.shape} do not match batch {self.batch} and horizon {T}")
        return u

    def terms(self, u, with_jacobian: bool = True):
        """Unweighted residual blocks c_i (B, n_i) and their Jacobians (B, n_i, 2T)."""
        cfg = self.cfg
        T, dt = cfg.horizon, cfg.dt
        u = self._check_u(dk.as_tensor(u, np.float64))
        B = self.batch
        acc, yaw = u[:, :T], u[:, T:]
        x, y, th, v, v_pre, th_pre = rollout_tensor(self.state, acc, yaw, dt)

        xy = np.stack([x.data, y.data], -1)                       # (B, T, 2)
        k = np.stack([rt.nearest(xy[b]) for b, rt in enumerate(self.routes)])
        gather = lambda attr: np.stack([getattr(rt, attr)[k[b]] for b, rt in enumerate(self.routes)])
        rxy, nrm, hdg = gather("xy"), gather("normal"), gather("heading")
        v_allow, ramp = gather("v_allow"), gather("ramp")

        c = {}
        c["speed"] = dk.sub(v, v_allow)
        c["acceleration"] = acc
        c["yaw_rate"] = yaw
        c["jerk"] = dk.div(dk.sub(acc[:, 1:], acc[:, :-1]), dt)
        c["yaw_rate_change"] = dk.div(dk.sub(yaw[:, 1:], yaw[:, :-1]), dt)
        c["lateral"] = dk.add(dk.mul(dk.sub(x, rxy[..., 0]), nrm[..., 0]),
                              dk.mul(dk.sub(y, rxy[..., 1]), nrm[..., 1]))
        diff = th.data - hdg
        ref = hdg + 2.0 * np.pi * np.round(diff / (2.0 * np.pi))     # wrap as a constant shift
        c["heading"] = dk.sub(th, ref)
        over = dk.sub(v, v_allow)
        stop_on = ramp & (over.data > 0)
        c["stop"] = dk.where(stop_on, over, 0.0)
        dx = dk.sub(dk.expand_dims(x, 1), self.pred[..., 0])          # (B, J, T)
        dy = dk.sub(dk.expand_dims(y, 1), self.pred[..., 1])
        dist = dk.norm(dk.stack([dx, dy], -1), axis=-1)
        gap = dk.sub(cfg.d_safe, dist)
        safe_on = self.pred_valid & (gap.data > 0)
        c["safety"] = dk.reshape(dk.where(safe_on, gap, 0.0), (B, -1))
        if not with_jacobian:
            return c, None

        I = np.eye(T)
        zero = np.zeros((B, T, T))
        L, S, D = self._L, self._S, self._D
        dL = dt * L
        # d(position)/d(controls): dt^2 * L diag(.) S, see rollout_tensor
        cth, sth = dk.cos(th_pre), dk.sin(th_pre)
        ax = dk.mul(dt * dt, dk.matmul(L, dk.mul(dk.expand_dims(cth, -1), S)))
        ay = dk.mul(dt * dt, dk.matmul(L, dk.mul(dk.expand_dims(sth, -1), S)))
        bx = dk.mul(-dt * dt, dk.matmul(L, dk.mul(dk.expand_dims(dk.mul(v_pre, sth), -1), S)))
        by = dk.mul(dt * dt, dk.matmul(L, dk.mul(dk.expand_dims(dk.mul(v_pre, cth), -1), S)))
        Jx = dk.concat([ax, bx], axis=2)                              # (B, T, 2T)
        Jy = dk.concat([ay, by], axis=2)

        const = lambda left, right: dk.Tensor(np.concatenate(
            [np.broadcast_to(left, (B,) + left.shape[-2:]),
             np.broadcast_to(right, (B,) + right.shape[-2:])], axis=2), dtype=np.float64)
        zT1 = np.zeros((T - 1, T))
        J = {}
        J["speed"] = const(dL, zero)
        J["acceleration"] = const(I, zero)
        J["yaw_rate"] = const(zero, I)
        J["jerk"] = const(D / dt, zT1)
        J["yaw_rate_change"] = const(zT1, D / dt)
        J["lateral"] = dk.add(dk.mul(Jx, nrm[..., 0:1]), dk.mul(Jy, nrm[..., 1:2]))
        J["heading"] = const(zero, dL)
        J["stop"] = const(dL * 1.0, zero) * stop_on[..., None]
        if self.pred.shape[1]:
            inv = dk.div(1.0, dk.where(safe_on, dist, 1.0))
            ux = dk.expand_dims(dk.mul(dk.where(safe_on, dx, 0.0), inv), -1)   # (B, J, T, 1)
            uy = dk.expand_dims(dk.mul(dk.where(safe_on, dy, 0.0), inv), -1)
            js = dk.neg(dk.add(dk.mul(ux, dk.expand_dims(Jx, 1)), dk.mul(uy, dk.expand_dims(Jy, 1))))
            J["safety"] = dk.reshape(js, (B, -1, 2 * T))
        else:
            J["safety"] = dk.Tensor(np.zeros((B, 0, 2 * T)), dtype=np.float64)
        return c, J

    def residuals(self, u, weights=None, with_jacobian: bool = True):
        """Stacked weighted residuals r (B, R) and Jacobian (B, R, 2T)."""
        sw = _sqrt_weights(self.cfg.weights if weights is None else weights)
        c, J = self.terms(u, with_jacobian)
        r = dk.concat([dk.mul(c[t], sw[i]) for i, t in enumerate(TERMS)], axis=1)
        if J is None:
            return r, None
        Jw = dk.concat([dk.mul(J[t], sw[i]) for i, t in enumerate(TERMS)], axis=1)
        return r, Jw

    def objective(self, u, weights=None) -> np.ndarray:
        with dk.no_grad():
            r, _ = self.residuals(u, weights, with_jacobian=False)
        return 0.5 * (r.data ** 2).sum(-1)

    def breakdown(self, u, weights=None) -> dict:
        """Per-term weighted cost ½ω_i‖c_i‖² for batch row 0."""
        w = self.cfg.weights if weights is None else weights
        if not isinstance(w, dict):
            w = dict(zip(TERMS, np.asarray(w, np.float64)))
        with dk.no_grad():
            c, _ = self.terms(u, with_jacobian=False)
        return {t: 0.5 * float(w.get(t, DEFAULT_WEIGHTS[t])) * float((c[t].data[0] ** 2).sum()) for t in TERMS}

    def residual_fn(self, b: int = 0):
        """Flat-vector (r, J) callable for one batch row, as used by :func:`gauss_newton`."""
        sub = self.select(b)

        def fn(u):
            with dk.no_grad():
                r, J = sub.residuals(np.asarray(u, np.float64)[None])
            return r.data[0], J.data[0]
        return fn

    def select(self, b: int) -> "PlannerCost":
        out = PlannerCost.__new__(PlannerCost)
        out.__dict__.update(self.__dict__)
        out.state = self.state[b:b + 1]
        out.routes = [self.routes[b]]
        out.pred = self.pred[b:b + 1]
        out.pred_valid = self.pred_valid[b:b + 1]
        return out


def build_residuals(u, x0, route, predictions=None, weights=None, cfg: PlannerConfig | None = None,
                    pred_valid=None) -> np.ndarray:
    """Weighted residual vector for a single scene (see :class:`PlannerCost`)."""
    cfg = cfg or PlannerConfig()
    u = np.asarray(u, np.float64)
    if u.shape != (2 * cfg.horizon,):
        raise ValueError(f"controls of length {u.shape} do not match horizon {cfg.horizon}")
    cost = PlannerCost(x0, route, None if predictions is None else np.asarray(predictions)[None],
                       None if pred_valid is None else np.asarray(pred_valid)[None], cfg)
    with dk.no_grad():
        r, _ = cost.residuals(u[None], weights, with_jacobian=False)
    return r.data[0]
