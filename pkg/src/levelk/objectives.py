"""Imitation and interaction losses, best-mode selection, K-means anchors and training."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import _accel
from . import diffkit as dk
from .diffkit import functional as F
from .diffkit.nn import AdamW, clip_grad_norm
from .features import Batch, make_batch
from .model import LevelKModel, LevelStack, ModeSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    decay_after: int | None = 10      # first decayed epoch is decay_after + 1 (1-based)
    decay_every: int = 2
    decay_factor: float = 0.5
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    w1: float = 1.0                   # imitation weight
    w2: float = 0.1                   # interaction weight
    margin: float = 5.0               # interaction gating distance, m
    batch_size: int = 32
    seed: int = 0
    profile: str = "planning"
    final_level_only: bool = False    # ablation: loss on the last level only
    max_steps: int | None = None

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "TrainConfig":
        if profile == "prediction":
            base = dict(epochs=30, decay_after=15, decay_every=3, profile="prediction", w2=0.0)
        elif profile == "planning":
            base = dict(epochs=20, decay_after=10, decay_every=2, profile="planning")
        else:
            raise ValueError(f"unknown profile {profile!r}")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.decay_after is None or epoch <= self.decay_after:
            return self.lr
        n = (epoch - self.decay_after - 1) // self.decay_every + 1
        return self.lr * self.decay_factor ** n


@dataclass
class LossReport:
    imitation: list            # per level, floats
    interaction: list          # per level (0.0 at level 0)
    cross_entropy: list        # per level, part of imitation
    total: float
    best_mode: list            # per level, (B,) or (B, N) int arrays
    total_tensor: dk.Tensor | None = field(default=None, repr=False)

    def recomputed_total(self, w1: float, w2: float) -> float:
        return w1 * float(np.sum(self.imitation)) + w2 * float(np.sum(self.interaction))


class NonFiniteLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# loss terms


def nll_term(gmm, gt) -> dk.Tensor:
    """Per-step Gaussian negative log-likelihood without the log(2 pi) constant.

    ``gmm`` (..., 4) holds (mu_x, mu_y, log sigma_x, log sigma_y); ``gt`` (..., 2).
    """
    gmm = dk.as_tensor(gmm)
    gt = np.asarray(gt, dtype=gmm.dtype)
    d = dk.sub(gt, gmm[..., :2])
    log_sigma = gmm[..., 2:]
    z = d * dk.exp(-log_sigma)
    return dk.sum_(log_sigma, axis=-1) + 0.5 * dk.sum_(z * z, axis=-1)


def select_best_mode(means: np.ndarray, gt: np.ndarray, gt_valid: np.ndarray, agent_mask=None) -> np.ndarray:
    """Joint selection: the mode with least summed displacement over agents and steps.

    means (B, N, M, T, 2), gt (B, N, T, 2), gt_valid (B, N, T). ``agent_mask`` (B, N)
    limits the agents that count. Ties resolve to the lowest index.
    """
    means = np.asarray(means, np.float64)
    err = np.linalg.norm(means - np.asarray(gt, np.float64)[:, :, None], axis=-1)   # (B, N, M, T)
    w = np.asarray(gt_valid, bool)[:, :, None, :]
    if agent_mask is not None:
        w = w & np.asarray(agent_mask, bool)[:, :, None, None]
    total = np.where(w, err, 0.0).sum(axis=(1, 3))                                     # (B, M)
    return np.argmin(total, axis=-1)


def select_marginal_mode(points: np.ndarray, category: np.ndarray, current: np.ndarray,
                         gt: np.ndarray, gt_valid: np.ndarray) -> np.ndarray:
    """Per agent: index of the intention point nearest the ground-truth endpoint.

    Points live in the agent's heading frame relative to its current position.
    """
    B, N = category.shape
    last = np.where(gt_valid.any(-1), gt_valid.shape[-1] - 1 - np.argmax(gt_valid[..., ::-1], -1), 0)
    end = np.take_along_axis(gt, last[..., None, None], axis=2)[:, :, 0]          # (B, N, 2)
    d = end - current[..., :2]
    c, s = np.cos(current[..., 2]), np.sin(current[..., 2])
    local = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)
    pts = np.asarray(points)[category]                                              # (B, N, M, 2)
    return np.argmin(((pts - local[:, :, None]) ** 2).sum(-1), axis=-1)


def _gather_mode(t: dk.Tensor, idx: np.ndarray) -> dk.Tensor:
    """t (B, N, M, ...) picked at idx (B,) or (B, N) -> (B, N, ...)."""
    B, N = t.shape[:2]
    idx = np.broadcast_to(idx.reshape(B, -1), (B, N))
    return t[np.arange(B)[:, None], np.arange(N)[None, :], idx]


def imitation_loss(modes: ModeSet, gt, gt_valid, best: np.ndarray, agent_mask) -> tuple[dk.Tensor, dk.Tensor]:
    """NLL at the selected mode summed over steps, plus score cross-entropy, per agent.

    Returns (loss, cross_entropy), each summed over agents and averaged over the batch.
    """
    B, N = modes.scores.shape[:2]
    agent_mask = np.asarray(agent_mask, bool)
    sel = _gather_mode(modes.gmm, best)                                               # (B, N, T, 4)
    nll = nll_term(sel, gt)
    valid = np.asarray(gt_valid, bool) & agent_mask[..., None]
    nll = dk.sum_(dk.where(valid, nll, 0.0)) * (1.0 / B)
    logp = F.log_softmax(modes.scores, axis=-1)
    picked = _gather_mode(logp, best)                                                 # (B, N)
    ce = dk.sum_(dk.where(agent_mask, -picked, 0.0)) * (1.0 / B)
    return nll + ce, ce


def interaction_loss(cur: ModeSet, prev: ModeSet, agent_valid, margin: float = 5.0) -> dk.Tensor:
    """Repulsive potential between level-k modes and other agents' level-(k-1) modes.

    For agent i, mode m and step t the closest other agent/mode (j, n) at the
    same step contributes 1 / (d + 1) when d < margin. The previous level is a
    constant. Summed over agents, modes and steps; averaged over the batch.
    """
    means = cur.means
    prev_xy = prev.means.data.astype(np.float64)
    B, N, M, T, _ = means.shape
    agent_valid = np.asarray(agent_valid, bool)
    target = np.zeros(means.shape, dtype=means.dtype)
    close = np.zeros((B, N, M, T), bool)
    for b in range(B):
        j, n, dist = _accel.interaction_argmax(means.data[b].astype(np.float64), prev_xy[b], agent_valid[b])
        tgt = prev_xy[b][j, n, np.arange(T)[None, None, :]]
        target[b] = tgt
        close[b] = (dist < margin) & agent_valid[b][:, None, None]
    d = dk.norm(dk.sub(means, target), axis=-1)
    pot = dk.where(close, 1.0 / (d + 1.0), 0.0)
    return dk.sum_(pot) * (1.0 / B)


def best_modes(stack: LevelStack, batch: Batch, model: LevelKModel | None = None) -> list[np.ndarray]:
    out = []
    for modes in stack.modesets:
        if model is not None and model.cfg.intention_points:
            out.append(select_marginal_mode(model.points.data, batch.category, batch.current,
                                            batch.gt, batch.gt_valid))
        else:
            out.append(select_best_mode(modes.means.data, batch.gt, batch.gt_valid, batch.agent_valid))
    return out


def total_loss(stack: LevelStack, batch: Batch, cfg: TrainConfig, model: LevelKModel | None = None) -> LossReport:
    levels = list(range(len(stack)))
    if cfg.final_level_only:
        levels = levels[-1:]
    best = best_modes(stack, batch, model)
    imit, inter, ces = [], [], []
    total = None
    for k in levels:
        im, ce = imitation_loss(stack.modesets[k], batch.gt, batch.gt_valid, best[k], batch.agent_valid)
        term = im * cfg.w1
        it_val = 0.0
        if k >= 1:
            it = interaction_loss(stack.modesets[k], stack.modesets[k - 1], batch.agent_valid, cfg.margin)
            term = term + it * cfg.w2
            it_val = float(it.data)
        imit.append(float(im.data))
        ces.append(float(ce.data))
        inter.append(it_val)
        total = term if total is None else total + term
    rep = LossReport(imit, inter, ces, float(total.data), [best[k] for k in levels], total)
    if not np.isfinite(rep.total):
        raise NonFiniteLoss(f"non-finite loss: imitation={imit} interaction={inter}")
    return rep


# ---------------------------------------------------------------------------
# K-means anchors


def kmeans(points: np.ndarray, k: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 300):
    """Lloyd iterations with k-means++ seeding. Returns (centers, labels, sse history)."""
    pts = np.asarray(points, np.float64)
    if len(pts) < k:
        raise ValueError(f"need at least {k} points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    centers = [pts[rng.integers(len(pts))]]
    for _ in range(1, k):
        _, d2 = _accel.kmeans_assign(pts, np.array(centers))
        if d2.sum() <= 0:
            centers.append(pts[rng.integers(len(pts))])
            continue
        centers.append(pts[rng.choice(len(pts), p=d2 / d2.sum())])
    centers = np.array(centers)
    history = []
    for _ in range(max_iter):
        labels, d2 = _accel.kmeans_assign(pts, centers)
        history.append(float(d2.sum()))
        new = centers.copy()
        for c in range(k):
            members = pts[labels == c]
            if len(members):
                new[c] = members.mean(0)
        shift = float(np.max(np.linalg.norm(new - centers, axis=-1)))
        centers = new
        if shift < tol:
            break
    labels, d2 = _accel.kmeans_assign(pts, centers)
    history.append(float(d2.sum()))
    return centers, labels, history


def kmeans_points(endpoints_by_category: dict, k: int = 64, seed: int = 0) -> dict:
    """Per-category intention points from ground-truth endpoints."""
    out = {}
    for cat, pts in endpoints_by_category.items():
        pts = np.asarray(pts)
        if len(pts) == 0:
            raise ValueError(f"category {cat!r} has no endpoints")
        out[cat] = kmeans(pts, k, seed)[0]
    return out


def corpus_endpoints(batch: Batch) -> dict:
    """Ground-truth endpoint displacements in each agent's heading frame, by category."""
    B, N = batch.category.shape
    ok = batch.agent_valid & batch.gt_valid[..., -1]
    d = batch.gt[..., -1, :] - batch.current[..., :2]
    c, s = np.cos(batch.current[..., 2]), np.sin(batch.current[..., 2])
    local = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)
    return {cat: local[ok & (batch.category == cat)] for cat in range(3)}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: LevelKModel
    history: list            # per epoch dicts
    grad_norms: list         # pre-clip norms per step
    clipped_norms: list      # post-clip norms per step
    steps: int = 0
    aborted: str | None = None


def train(model: LevelKModel, corpus, cfg: TrainConfig, log_path=None, batch: Batch | None = None) -> TrainResult:
    """AdamW with decoupled weight decay, global-norm clipping and a step LR schedule.

    ``corpus`` is a list of scenarios (or pass a prebuilt ``batch``). Shuffling
    is seeded, so identical inputs give bitwise-identical parameters.
    """
    mc = model.cfg
    if batch is None:
        if not corpus:
            raise ValueError("empty training corpus")
        batch = make_batch(list(corpus), mc.n_agents, mc.hist_steps, mc.fut_steps)
    n = batch.size
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history, norms, clipped = [], [], []
    last_good = model.state_dict()
    step = 0
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "total"] + [f"imitation_L{k}" for k in range(mc.levels + 1)]
                        + [f"interaction_L{k}" for k in range(mc.levels + 1)] + ["grad_norm"])
    result = TrainResult(model, history, norms, clipped)
    try:
        for epoch in range(1, cfg.epochs + 1):
            opt.lr = cfg.lr_at(epoch)
            order = rng.permutation(n)
            sums, count = None, 0
            for start in range(0, n, cfg.batch_size):
                sub = batch.select(np.sort(order[start:start + cfg.batch_size]))
                opt.zero_grad()
                _, stack = model(sub)
                try:
                    rep = total_loss(stack, sub, cfg, model)
                except NonFiniteLoss as exc:
                    model.load_state_dict(last_good)
                    result.aborted = f"epoch {epoch} step {step}: {exc}"
                    log.error("training diverged, restored last good parameters: %s", exc)
                    return result
                dk.backward(rep.total_tensor)
                norms.append(clip_grad_norm(params, cfg.clip_norm))
                clipped.append(float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                                  for p in params if p.grad is not None))))
                opt.step()
                last_good = model.state_dict()
                step += 1
                row = np.array([rep.total] + _pad(rep.imitation, mc.levels + 1) + _pad(rep.interaction, mc.levels + 1))
                sums = row if sums is None else sums + row
                count += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            mean = sums / max(count, 1)
            entry = {"epoch": epoch, "lr": opt.lr, "total": float(mean[0]), "steps": step,
                     "imitation": mean[1:mc.levels + 2].tolist(), "interaction": mean[mc.levels + 2:].tolist(),
                     "grad_norm": norms[-1]}
            history.append(entry)
            if writer:
                writer.writerow([epoch, opt.lr] + mean.tolist() + [norms[-1]])
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if fh:
            fh.close()
    result.steps = step
    return result


def _pad(vals, n):
    vals = list(vals)
    return vals + [0.0] * (n - len(vals)) if len(vals) < n else vals[-n:]
