"""Learn planner cost weights by differentiating through a short Gauss-Newton unroll."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffkit as dk
from ..scene.frame import normalize
from ..scene.types import X, Y, HEADING, ROUTE_DIM, Scenario
from .cost import DEFAULT_WEIGHTS, TERMS, PlannerConfig, PlannerCost
from .dynamics import inverse_dynamics, rollout_tensor
from .solver import gauss_newton_step_tensor

MIN_INIT_WEIGHT = 1e-3   # softplus cannot represent an exact zero


@dataclass
class WeightLearnConfig:
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.001
    inner_iters: int = 3
    inner_step: float = 0.5
    lr: float = 5e-4
    batch_size: int = 32
    steps: int = 10000
    seed: int = 0
    init_weights: dict = field(default_factory=dict)

    def validate(self) -> "WeightLearnConfig":
        for name in ("lambda1", "lambda2", "lr", "inner_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda3 < 0 or self.inner_iters < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lambda3 >= 0, inner_iters >= 1, batch_size >= 1 and steps >= 0 required")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "WeightLearnConfig":
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown weight-learning keys {sorted(bad)}")
        return cls(**d).validate()


@dataclass
class WeightExample:
    """One ego planning problem: start state, route, other agents and the expert's future."""
    state: np.ndarray          # (4,) x, y, heading, speed
    route: np.ndarray          # (R, 5)
    predictions: np.ndarray    # (J, T, 2)
    pred_valid: np.ndarray     # (J, T)
    expert: np.ndarray         # (T, 2)
    u0: np.ndarray             # (2T,)


@dataclass
class WeightLearnResult:
    weights: dict
    history: list              # outer loss per step (nan when skipped)
    weight_history: np.ndarray  # (steps + 1, n_terms)
    skipped: int = 0


def softplus_inv(w):
    w = np.maximum(np.asarray(w, np.float64), MIN_INIT_WEIGHT)
    return w + np.log(-np.expm1(-w))


def ego_state(scn: Scenario) -> np.ndarray:
    """Ego position and heading at the current step, speed looking one step ahead."""
    cur = scn.current[0]
    nxt = scn.tracks[0, scn.n_hist + 1, :2]
    v = float(np.hypot(*(nxt - cur[:2]))) / scn.dt
    return np.array([cur[X], cur[Y], cur[HEADING], v])


def examples_from_corpus(corpus, model=None, horizon: int = 50) -> list[WeightExample]:
    """Build examples from ego-normalized scenarios.

    Other agents' positions come from the model's final-level most-likely
    modes when a model is given, otherwise from their logged futures. The
    inner solve starts from the model's ego plan, or from constant speed
    and heading.
    """
    from ..features import make_batch
    out = []
    for scn in corpus:
        scn = normalize(scn)
        state = ego_state(scn)
        fut, fv = scn.future(horizon)
        expert = fut[0, :, :2]
        if model is not None:
            mc = model.cfg
            batch = make_batch([scn], mc.n_agents, mc.hist_steps, mc.fut_steps, already_normalized=True)
            pred, _ = model.most_likely(batch)
            pred = pred[0]
            if pred.shape[1] < horizon:
                raise ValueError(f"model horizon {pred.shape[1]} shorter than planner horizon {horizon}")
            others = pred[1:, :horizon]
            ovalid = np.repeat(batch.agent_valid[0, 1:, None], horizon, 1)
            plan = np.vstack([state[None, :2], pred[0, :horizon]])
            u0 = inverse_dynamics(plan, scn.dt, theta_init=state[2]).as_vector()
        else:
            others = fut[1:, :, :2]
            ovalid = fv[1:]
            u0 = np.zeros(2 * horizon)
        out.append(WeightExample(state, scn.route, others, ovalid, expert, u0))
    return out


def _stack(examples, planner_cfg):
    J = max(len(e.predictions) for e in examples)
    T = planner_cfg.horizon
    B = len(examples)
    pred = np.zeros((B, J, T, 2))
    valid = np.zeros((B, J, T), bool)
    for b, e in enumerate(examples):
        n = len(e.predictions)
        pred[b, :n] = e.predictions[:, :T]
        valid[b, :n] = e.pred_valid[:, :T]
    cost = PlannerCost(np.stack([e.state for e in examples]), [e.route for e in examples],
                       pred, valid, planner_cfg)
    u0 = np.stack([e.u0 for e in examples])
    expert = np.stack([e.expert[:T] for e in examples])
    return cost, u0, expert


def outer_loss(rho, cost: PlannerCost, u0, expert, cfg: WeightLearnConfig):
    """Mean over the batch of λ1·Σ_t‖p̂_t − p_t‖² + λ2·‖p̂_T − p_T‖² + λ3·Σ_i‖c_i‖²."""
    w = dk.softplus(rho)
    u = dk.Tensor(u0, dtype=np.float64)
    for _ in range(cfg.inner_iters):
        r, J = cost.residuals(u, w)
        u = gauss_newton_step_tensor(u, r, J, cfg.inner_step, cost.cfg.damping)
    T = cost.cfg.horizon
    x, y, *_ = rollout_tensor(cost.state, u[:, :T], u[:, T:], cost.cfg.dt)
    ex = dk.sub(x, expert[..., 0])
    ey = dk.sub(y, expert[..., 1])
    sq = dk.add(dk.square(ex), dk.square(ey))                      # (B, T)
    loss = dk.add(dk.mul(cfg.lambda1, dk.sum_(sq, axis=1)), dk.mul(cfg.lambda2, sq[:, -1]))
    if cfg.lambda3:
        c, _ = cost.terms(u, with_jacobian=False)
        csum = dk.sum_(dk.concat([dk.square(c[t]) for t in TERMS], axis=1), axis=1)
        loss = dk.add(loss, dk.mul(cfg.lambda3, csum))
    return dk.mean(loss)


def learn_weights(corpus, model=None, cfg: WeightLearnConfig | None = None,
                  planner_cfg: PlannerConfig | None = None, log_path=None) -> WeightLearnResult:
    """Fit cost weights (softplus-parameterized) with Adam on the outer imitation loss.

    ``corpus`` holds scenarios or ready-made :class:`WeightExample` items.
    Batches whose inner solve produces non-finite values are skipped and logged.
    """
    cfg = (cfg or WeightLearnConfig()).validate()
    planner_cfg = planner_cfg or PlannerConfig()
    examples = [e for e in corpus if isinstance(e, WeightExample)]
    if len(examples) != len(corpus):
        examples = examples_from_corpus(corpus, model, planner_cfg.horizon)
    if not examples:
        raise ValueError("empty corpus")
    init = {**DEFAULT_WEIGHTS, **planner_cfg.weights, **cfg.init_weights}
    rho = dk.Tensor(softplus_inv([init[t] for t in TERMS]), requires_grad=True, dtype=np.float64)
    opt = dk.AdamW([rho], lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(examples))
    full = _stack(examples, planner_cfg) if bs == len(examples) else None
    history, weights, skipped = [], [np.log1p(np.exp(rho.data))], 0
    log_rows = []
    with dk.precision("float64"):
        for step in range(cfg.steps):
            if full is not None:
                cost, u0, expert = full
            else:
                idx = np.sort(rng.choice(len(examples), bs, replace=False))
                cost, u0, expert = _stack([examples[i] for i in idx], planner_cfg)
            opt.zero_grad()
            try:
                loss = outer_loss(rho, cost, u0, expert, cfg)
                ok = bool(np.isfinite(loss.data))
            except np.linalg.LinAlgError as exc:
                ok, loss = False, None
                log_rows.append({"step": step, "event": f"skipped: {exc}"})
            if not ok:
                skipped += 1
                history.append(float("nan"))
                weights.append(weights[-1])
                if loss is not None:
                    log_rows.append({"step": step, "event": "skipped: non-finite outer loss"})
                continue
            loss.backward()
            if not np.all(np.isfinite(rho.grad)):
                skipped += 1
                history.append(float("nan"))
                weights.append(weights[-1])
                log_rows.append({"step": step, "event": "skipped: non-finite gradient"})
                continue
            opt.step()
            history.append(float(loss.data))
            weights.append(np.log1p(np.exp(rho.data)))
            log_rows.append({"step": step, "event": "", "loss": float(loss.data)})
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["step", "loss", "event"])
            wr.writeheader()
            for row in log_rows:
                wr.writerow({"loss": "", **row})
    final = np.log1p(np.exp(rho.data))
    return WeightLearnResult(dict(zip(TERMS, map(float, final))), history, np.array(weights), skipped)


def swerve_examples(n: int = 10, seed: int = 0, horizon: int = 50, dt: float = 0.1,
                    speed: float = 8.0) -> list[WeightExample]:
    """Straight-road problems where the expert bends around a parked agent near its path."""
    rng = np.random.default_rng(seed)
    out = []
    s = np.arange(1000) * 0.1
    route = np.zeros((1000, ROUTE_DIM))
    route[:, 0] = s
    route[:, 3] = speed
    t = np.arange(1, horizon + 1) * dt
    for _ in range(n):
        xa = rng.uniform(16.0, 26.0)
        ya = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0)
        clear = 3.2
        amp = -np.sign(ya) * (clear - abs(ya))
        width = rng.uniform(5.0, 7.0)
        ex_x = speed * t
        ex_y = amp * np.exp(-0.5 * ((ex_x - xa) / width) ** 2)
        expert = np.stack([ex_x, ex_y], -1)
        agent = np.tile([xa, ya], (1, horizon, 1))
        # start heading/speed consistent with the expert's first displacement
        d0 = expert[0]
        state = np.array([0.0, 0.0, np.arctan2(d0[1], d0[0]), np.hypot(*d0) / dt])
        out.append(WeightExample(state, route, agent, np.ones((1, horizon), bool), expert,
                                 np.zeros(2 * horizon)))
    return out


def config_dict(cfg: WeightLearnConfig) -> dict:
    return asdict(cfg)
