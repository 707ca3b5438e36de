"""Finite-difference checks over every differentiable piece, at 64-bit.

Each check returns the max relative error between reverse-mode gradients and
central differences. ``run_all`` is what ``levelk grad-check`` prints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .diffkit import functional as F

TOLERANCE = 1e-4


@dataclass
class CheckRow:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= TOLERANCE)


def directional_check(params, fn, n_dirs: int = 6, eps: float = 1e-5, seed: int = 0) -> float:
    """Compare gᵀv with a central difference along random directions v.

    Used where a full per-entry sweep would take too long (whole model).
    """
    rng = np.random.default_rng(seed)
    with dk.precision("float64"):
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        out = fn()
        w = rng.standard_normal(out.shape)
        grads = dk.grad(out, params, seed=w)
        worst = 0.0
        for _ in range(n_dirs):
            dirs = [rng.standard_normal(p.shape) for p in params]
            norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]     # unit step keeps clear of activation kinks
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            base = [p.data.copy() for p in params]
            vals = []
            for sign in (1.0, -1.0):
                for p, b, d in zip(params, base, dirs):
                    p.data = b + sign * eps * d
                with dk.no_grad():
                    vals.append(float((fn().data * w).sum()))
            for p, b in zip(params, base):
                p.data = b
            numeric = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    return worst


def _rng():
    return np.random.default_rng(0)


def check_linear():
    r = _rng()
    return dk.check_gradients(lambda x, W, b: F.linear(x, W, b),
                              [r.normal(size=(3, 5)), r.normal(size=(5, 4)), r.normal(size=4)])


def check_mlp():
    r = _rng()
    with dk.precision("float64"):
        m = dk.MLP([4, 8, 3], r, activation=dk.gelu)
    return dk.check_module_gradients(m.parameters(), lambda x: m(x), [r.normal(size=(5, 4))])


def check_attention():
    r = _rng()
    with dk.precision("float64"):
        blk = dk.AttentionBlock(8, 2, r)
    mask = r.random((2, 4, 6)) > 0.3
    mask[..., 0] = True
    return dk.check_module_gradients(blk.parameters(), lambda x, c: blk(x, c, mask=mask),
                                     [r.normal(size=(2, 4, 8)), r.normal(size=(2, 6, 8))])


def check_layer_norm():
    r = _rng()
    return dk.check_gradients(lambda x, g, b: F.layer_norm(x, g, b),
                              [r.normal(size=(4, 6)), r.normal(size=6), r.normal(size=6)])


def check_recurrent():
    r = _rng()
    with dk.precision("float64"):
        lstm = dk.LSTM(3, 5, r)
    return dk.check_module_gradients(lstm.parameters(), lambda s: lstm(s), [r.normal(size=(2, 6, 3))])


def check_pooling():
    r = _rng()
    return dk.check_gradients(lambda x: F.max_pool(x, axis=1, window=3), [r.normal(size=(2, 9, 4))])


def check_softmax():
    r = _rng()
    return dk.check_gradients(lambda x: F.log_softmax(x, axis=-1) + F.softmax(x, axis=-1),
                              [r.normal(size=(3, 6))])


def _random_modeset(r, B=2, N=3, M=2, T=5, spread=3.0):
    gmm = np.concatenate([r.normal(scale=spread, size=(B, N, M, T, 2)),
                          r.normal(scale=0.3, size=(B, N, M, T, 2))], -1)
    return gmm, r.normal(size=(B, N, M))


def check_nll():
    from .objectives import nll_term
    r = _rng()
    gt = r.normal(size=(3, 5, 2))
    return dk.check_gradients(lambda g: nll_term(g, gt), [np.concatenate(
        [r.normal(size=(3, 5, 2)), r.normal(scale=0.3, size=(3, 5, 2))], -1)])


def check_imitation():
    from .model import ModeSet
    from .objectives import imitation_loss
    r = _rng()
    gmm, scores = _random_modeset(r)
    gt = r.normal(scale=3.0, size=(2, 3, 5, 2))
    gv = r.random((2, 3, 5)) > 0.2
    best = r.integers(0, 2, size=(2, 3))
    am = np.array([[True, True, False], [True, True, True]])
    return dk.check_gradients(lambda g, s: imitation_loss(ModeSet(g, s, 0), gt, gv, best, am)[0], [gmm, scores])


def check_cross_entropy():
    from .model import ModeSet
    from .objectives import imitation_loss
    r = _rng()
    gmm, scores = _random_modeset(r)
    gt = r.normal(scale=3.0, size=(2, 3, 5, 2))
    best = r.integers(0, 2, size=(2, 3))
    fixed = dk.Tensor(gmm, dtype=np.float64)
    return dk.check_gradients(
        lambda s: imitation_loss(ModeSet(fixed, s, 0), gt, np.ones((2, 3, 5), bool), best,
                                 np.ones((2, 3), bool))[1], [scores])


def check_interaction():
    from .model import ModeSet
    from .objectives import interaction_loss
    r = _rng()
    cur, s = _random_modeset(r)
    prev, _ = _random_modeset(np.random.default_rng(1))
    valid = np.ones((2, 3), bool)
    prev_set = ModeSet(dk.Tensor(prev, dtype=np.float64), dk.Tensor(s, dtype=np.float64), 0)
    return dk.check_gradients(lambda g: interaction_loss(ModeSet(g, s, 1), prev_set, valid, margin=5.0), [cur])


def check_forward_dynamics():
    from .planner.dynamics import rollout_tensor
    r = _rng()
    state = np.array([[1.0, -2.0, 0.3, 6.0], [0.0, 0.0, -1.0, 2.0]])

    def fn(a, d):
        x, y, th, v, *_ = rollout_tensor(state, a, d, 0.1)
        return dk.stack([x, y, th, v], -1)
    return dk.check_gradients(fn, [r.normal(size=(2, 12)), r.normal(scale=0.2, size=(2, 12))])


def check_planner_jacobian():
    """Analytic residual Jacobian against central differences of the residuals."""
    from .planner.cost import PlannerConfig, PlannerCost
    from .planner.learn import swerve_examples
    ex = swerve_examples(1, seed=3)[0]
    cfg = PlannerConfig(horizon=50)
    cost = PlannerCost(ex.state, ex.route, ex.predictions[None], None, cfg)
    fn = cost.residual_fn(0)
    u = np.random.default_rng(0).normal(scale=0.3, size=100)
    _, J = fn(u)
    num = np.zeros_like(J)
    for j in range(len(u)):
        e = np.zeros_like(u)
        e[j] = 1e-6
        num[:, j] = (fn(u + e)[0] - fn(u - e)[0]) / 2e-6
    return dk.relative_error(J, num, scale=float(np.abs(J).max()))


def check_weight_unroll():
    """Outer weight-learning loss through three Gauss-Newton steps, w.r.t. the weight logits."""
    from .planner.cost import PlannerConfig
    from .planner.learn import WeightLearnConfig, _stack, outer_loss, softplus_inv
    from .planner.learn import swerve_examples
    from .planner.cost import DEFAULT_WEIGHTS, TERMS
    ex = swerve_examples(2, seed=1, horizon=20)
    cost, u0, expert = _stack(ex, PlannerConfig(horizon=20))
    rho0 = softplus_inv([DEFAULT_WEIGHTS[t] for t in TERMS])
    return dk.check_gradients(lambda rho: outer_loss(rho, cost, u0, expert, WeightLearnConfig()), [rho0])


def check_model_stack():
    """Whole model (N=3, M=2, K=2, D=16, 5 future steps) through the training loss."""
    from .features import make_batch
    from .model import LevelKModel, ModelConfig
    from .objectives import TrainConfig, total_loss
    from .scene.generator import generate_scenario
    cfg = ModelConfig(n_agents=3, modes=2, levels=2, d_model=16, fut_steps=5, hist_steps=5,
                      stop_gradient=False, seed=0)
    with dk.precision("float64"):
        model = LevelKModel(cfg)
    batch = make_batch([generate_scenario("intersection", 3, 0), generate_scenario("merge", 3, 1)],
                       3, 5, 5)
    # the interaction term holds the previous level constant by design, so finite
    # differences would see a dependence the gradient deliberately ignores
    tc = TrainConfig(w2=0.0)

    def fn():
        _, stack = model.forward(batch)
        return total_loss(stack, batch, tc, model).total_tensor
    return directional_check(model.parameters(), fn, n_dirs=6)


CHECKS = {
    "linear": check_linear,
    "mlp": check_mlp,
    "attention_block": check_attention,
    "layer_norm": check_layer_norm,
    "recurrent_encoder": check_recurrent,
    "max_pool": check_pooling,
    "softmax": check_softmax,
    "nll_term": check_nll,
    "imitation_loss": check_imitation,
    "cross_entropy": check_cross_entropy,
    "interaction_loss": check_interaction,
    "forward_dynamics": check_forward_dynamics,
    "planner_jacobian": check_planner_jacobian,
    "weight_unroll": check_weight_unroll,
    "model_stack": check_model_stack,
}


def run_all(names=None) -> list[CheckRow]:
    rows = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            err = float(fn())
        except Exception:   # a crashing check is a failed check, reported as inf
            err = float("inf")
        rows.append(CheckRow(name, err, time.perf_counter() - t0))
    return rows
