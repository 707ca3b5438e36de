"""Refine a predicted ego plan with the cost stack and Gauss-Newton."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import PlannerConfig, PlannerCost
from .dynamics import ControlSequence, EgoDynamicState, forward_dynamics, inverse_dynamics
from .solver import GNResult, gauss_newton


@dataclass
class RefineResult:
    traj: np.ndarray          # (T, 2) refined positions for steps 1..T
    states: np.ndarray        # (T + 1, 4) rollout including the start
    controls: ControlSequence
    solve: GNResult
    cost_before: dict
    cost_after: dict


def refine_plan(plan, state, route, predictions=None, pred_valid=None,
                cfg: PlannerConfig | None = None) -> RefineResult:
    """Warm-start from the controls that reproduce ``plan`` (T, 2) and solve.

    ``state`` is the ego (x, y, heading, speed); ``predictions`` (J, T, 2)
    are other agents' positions over the same horizon.
    """
    cfg = cfg or PlannerConfig()
    if not isinstance(state, EgoDynamicState):
        state = EgoDynamicState.from_array(state)
    plan = np.asarray(plan, np.float64)[: cfg.horizon]
    if len(plan) != cfg.horizon:
        raise ValueError(f"plan has {len(plan)} steps, planner horizon is {cfg.horizon}")
    full = np.vstack([[state.x, state.y], plan[:, :2]])
    u0 = inverse_dynamics(full, cfg.dt, theta_init=state.theta).as_vector()
    cost = PlannerCost(state, route, None if predictions is None else np.asarray(predictions)[None],
                       None if pred_valid is None else np.asarray(pred_valid)[None], cfg)
    res = gauss_newton(u0, cost.residual_fn(0), cfg.max_iter, cfg.step, cfg.damping)
    u = ControlSequence.from_vector(res.u, cfg.dt)
    states = forward_dynamics(state, u)
    return RefineResult(states[1:, :2], states, u, res,
                        cost.breakdown(u0[None]), cost.breakdown(res.u[None]))
