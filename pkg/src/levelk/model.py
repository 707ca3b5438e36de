"""Scene encoder and level-k decoder stack.

Shapes: B scenarios, N agent slots, M modes, T future steps, D features,
L = N + N_mr context tokens per agent.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffkit as dk
from .diffkit import functional as F
from .diffkit.nn import MLP, LSTM, AttentionBlock, Buffer, Module, Parameter
from .features import Batch
from .scene.types import CROSSWALK_DIM, LANE_DIM, STATE_DIM

LOG_SIGMA_MIN = float(np.log(1e-2))
LOG_SIGMA_MAX = float(np.log(1e2))

# fixed input scaling so raw metres and m/s land near unit range
_STATE_SCALE = np.array([0.05, 0.05, 1.0, 0.1, 0.1, 0.2, 0.5, 0.5, 1.0, 1.0, 1.0])
_LANE_SCALE = np.array([0.05, 0.05, 1.0] * 3 + [0.1, 0.5, 0.5, 0.5, 0.3, 1.0])
_CROSSWALK_SCALE = np.array([0.05, 0.05, 1.0])
_FUTURE_SCALE = 0.05
_OFFSET_SCALE = 10.0


@dataclass
class ModelConfig:
    profile: str = "planning"          # planning | prediction
    n_agents: int = 4
    hist_steps: int = 10               # past steps; the current step is added on top
    fut_steps: int = 50
    d_model: int = 16
    heads: int = 2
    enc_layers: int = 2
    levels: int = 2                    # K interaction levels on top of level 0
    modes: int = 6
    n_lanes: int = 2
    n_crosswalks: int = 1
    n_points: int = 20
    lane_pool: int = 10
    crosswalk_pool: int = 20
    shared_decoder: bool = False       # ablation: one interaction decoder reused K times
    separate_target_encoder: bool = False
    n_targets: int = 2
    intention_points: bool = False     # marginal profile: modes anchored on K-means endpoints
    stop_gradient: bool = True         # previous-level futures enter as constants
    seed: int = 0

    @property
    def map_tokens(self) -> int:
        return self.n_lanes * (self.n_points // self.lane_pool) + \
            self.n_crosswalks * (self.n_points // self.crosswalk_pool)

    def validate(self) -> "ModelConfig":
        problems = []
        if self.profile not in ("planning", "prediction"):
            problems.append(f"profile must be planning or prediction, got {self.profile!r}")
        for name in ("n_agents", "hist_steps", "fut_steps", "d_model", "heads", "enc_layers", "modes",
                     "n_points", "lane_pool", "crosswalk_pool"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.levels < 0:
            problems.append("levels must be >= 0")
        if self.d_model % max(self.heads, 1):
            problems.append(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.n_points % max(self.lane_pool, 1) or self.n_points % max(self.crosswalk_pool, 1):
            problems.append(f"n_points {self.n_points} must be a multiple of both pool steps")
        if self.separate_target_encoder and not 0 < self.n_targets <= self.n_agents:
            problems.append("n_targets must lie in [1, n_agents]")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def reference_config(profile: str = "planning") -> ModelConfig:
    """Full-size settings: D=256, E=6; K=4/M=6 for planning, K=6/M=64 marginal for prediction."""
    if profile == "planning":
        return ModelConfig(profile="planning", hist_steps=20, fut_steps=50, d_model=256, heads=8,
                           enc_layers=6, levels=4, modes=6, n_agents=20, n_lanes=6, n_crosswalks=4,
                           n_points=100).validate()
    return ModelConfig(profile="prediction", hist_steps=10, fut_steps=80, d_model=256, heads=8,
                       enc_layers=6, levels=6, modes=64, n_agents=20, n_lanes=6, n_crosswalks=4,
                       n_points=100, separate_target_encoder=True, intention_points=True).validate()


# ---------------------------------------------------------------------------
# data carried between stages


@dataclass
class SceneEncoding:
    context: dk.Tensor        # (B, N, L, D)
    mask: np.ndarray          # (B, N, L) token validity
    n_agents: int             # tokens [0, n_agents) are agents, the rest map groups
    agent_valid: np.ndarray   # (B, N)
    current: np.ndarray       # (B, N, 3)

    def own_tokens(self) -> dk.Tensor:
        """Each agent's own history token C_s[b, i, i] -> (B, N, D)."""
        n = self.n_agents
        return self.context[:, np.arange(n), np.arange(n)]


@dataclass
class ModeSet:
    gmm: dk.Tensor            # (B, N, M, T, 4): mu_x, mu_y, log sigma_x, log sigma_y
    scores: dk.Tensor         # (B, N, M) logits
    level: int

    @property
    def means(self) -> dk.Tensor:
        return self.gmm[..., :2]

    def probs(self) -> np.ndarray:
        s = self.scores.data.astype(np.float64)
        e = np.exp(s - s.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)


@dataclass
class LevelStack:
    modesets: list = field(default_factory=list)
    content: list = field(default_factory=list)   # Z per level, (B, N, M, D)

    @property
    def final(self) -> ModeSet:
        return self.modesets[-1]

    def __len__(self):
        return len(self.modesets)


# ---------------------------------------------------------------------------
# modules


class SceneEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        D = cfg.d_model
        self.cfg = cfg
        self.hist_lstm = LSTM(STATE_DIM, D, rng)
        self.target_lstm = LSTM(STATE_DIM, D, rng) if cfg.separate_target_encoder else None
        self.lane_mlp = MLP([LANE_DIM, D, D], rng, activation=dk.relu)
        self.crosswalk_mlp = MLP([CROSSWALK_DIM, D, D], rng, activation=dk.relu)
        self.layers = [AttentionBlock(D, cfg.heads, rng) for _ in range(cfg.enc_layers)]

    def encode_histories(self, hist, hist_valid, agent_valid) -> dk.Tensor:
        """(B, N, T, 11) -> (B, N, D); invalid agents give zero vectors."""
        dt = dk.get_default_dtype()
        x = np.where(hist_valid[..., None], hist, 0.0) * _STATE_SCALE
        x = dk.Tensor(x.astype(dt))
        if self.target_lstm is None:
            out = self.hist_lstm(x)
        else:
            k = self.cfg.n_targets
            parts = [self.target_lstm(x[:, :k])]
            if k < x.shape[1]:
                parts.append(self.hist_lstm(x[:, k:]))
            out = dk.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return dk.where(np.asarray(agent_valid)[..., None], out, 0.0)

    def _pool_polylines(self, mlp, rows, valid, scale, window):
        dt = dk.get_default_dtype()
        x = dk.Tensor((np.where(valid[..., None], rows, 0.0) * scale).astype(dt))
        feat = mlp(x)                                            # (B, N, P, Np, D)
        floor = np.finfo(dt).min
        feat = dk.where(np.broadcast_to(valid[..., None], feat.shape), feat, floor)
        pooled = F.max_pool(feat, axis=-2, window=window)        # (B, N, P, G, D)
        gvalid = valid.reshape(valid.shape[:-1] + (-1, window)).any(-1)
        pooled = dk.where(np.broadcast_to(gvalid[..., None], pooled.shape), pooled, 0.0)
        B, N, P, G, D = pooled.shape
        return dk.reshape(pooled, (B, N, P * G, D)), gvalid.reshape(B, N, P * G)

    def encode_map(self, lanes, lane_valid, crosswalks, crosswalk_valid):
        """Per-waypoint MLP, max-pooled in groups; returns (B, N, N_mr, D) and group validity."""
        lt, lv = self._pool_polylines(self.lane_mlp, lanes, lane_valid, _LANE_SCALE, self.cfg.lane_pool)
        if crosswalks.shape[2] == 0:
            return lt, lv
        ct, cv = self._pool_polylines(self.crosswalk_mlp, crosswalks, crosswalk_valid, _CROSSWALK_SCALE,
                                      self.cfg.crosswalk_pool)
        return dk.concat([lt, ct], axis=2), np.concatenate([lv, cv], axis=2)

    def relation_encode(self, agents, agent_valid, map_tokens, map_valid) -> tuple[dk.Tensor, np.ndarray]:
        B, N, D = agents.shape
        shared = dk.broadcast_to(dk.reshape(agents, (B, 1, N, D)), (B, N, N, D))
        ctx = dk.concat([shared, map_tokens], axis=2)            # (B, N, L, D)
        mask = np.concatenate([np.broadcast_to(agent_valid[:, None, :], (B, N, N)), map_valid], axis=2)
        for layer in self.layers:
            ctx = layer(ctx, mask=mask[:, :, None, :])
        ctx = dk.where(np.broadcast_to(mask[..., None], ctx.shape), ctx, 0.0)
        return ctx, mask

    def forward(self, batch: Batch) -> SceneEncoding:
        agents = self.encode_histories(batch.hist, batch.hist_valid, batch.agent_valid)
        maps, map_valid = self.encode_map(batch.lanes, batch.lane_valid, batch.crosswalks,
                                          batch.crosswalk_valid)
        ctx, mask = self.relation_encode(agents, batch.agent_valid, maps, map_valid)
        return SceneEncoding(ctx, mask, batch.hist.shape[1], batch.agent_valid, batch.current)


class _Heads(Module):
    def __init__(self, D, T, rng):
        self.T = T
        self.gmm = MLP([D, D, 4 * T], rng, activation=dk.relu)
        self.score = MLP([D, D, 1], rng, activation=dk.relu)

    def forward(self, z, current, level) -> ModeSet:
        B, N, M, _ = z.shape
        raw = dk.reshape(self.gmm(z), (B, N, M, self.T, 4))
        cur = np.asarray(current, dtype=raw.dtype)
        origin = cur[:, :, None, None, :2]
        # offsets live in each agent's heading frame; rows of rot are the rotated x/y axes
        c, s = np.cos(cur[..., 2]), np.sin(cur[..., 2])
        rot = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)[:, :, None]   # (B, N, 1, 2, 2)
        mu = dk.matmul(raw[..., :2] * _OFFSET_SCALE, rot) + origin
        log_sigma = dk.clip(raw[..., 2:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        scores = dk.reshape(self.score(z), (B, N, M))
        return ModeSet(dk.concat([mu, log_sigma], axis=-1), scores, level)


class Level0Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.block = AttentionBlock(cfg.d_model, cfg.heads, rng)
        self.heads = _Heads(cfg.d_model, cfg.fut_steps, rng)


class InteractionDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.future_attn = AttentionBlock(cfg.d_model, cfg.heads, rng)
        self.block = AttentionBlock(cfg.d_model, cfg.heads, rng)
        self.heads = _Heads(cfg.d_model, cfg.fut_steps, rng)


class LevelKModel(Module):
    def __init__(self, cfg: ModelConfig, intention_points: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        D, N, M = cfg.d_model, cfg.n_agents, cfg.modes
        dt = dk.get_default_dtype()
        self.encoder = SceneEncoder(cfg, rng)
        if cfg.intention_points:
            pts = np.zeros((3, M, 2)) if intention_points is None else np.asarray(intention_points)
            if pts.shape != (3, M, 2):
                raise ValueError(f"intention points must be (3, {M}, 2), got {pts.shape}")
            self.points = Buffer(pts.astype(dt))
            self.point_mlp = MLP([2, D, D], rng, activation=dk.relu)
            self.embedding = None
        else:
            self.embedding = Parameter(rng.normal(0.0, 1.0, size=(N, M, D)).astype(dt))
        self.level0 = Level0Decoder(cfg, rng)
        self.future_mlp = MLP([2, D, D], rng, activation=dk.relu)
        n_dec = min(cfg.levels, 1) if cfg.shared_decoder else cfg.levels
        self.interaction = [InteractionDecoder(cfg, rng) for _ in range(n_dec)]

    # -- stages --------------------------------------------------------
    def modality_embedding(self, batch_size: int, category: np.ndarray | None = None) -> dk.Tensor:
        N, M, D = self.cfg.n_agents, self.cfg.modes, self.cfg.d_model
        if self.embedding is not None:
            return dk.broadcast_to(dk.reshape(self.embedding, (1, N, M, D)), (batch_size, N, M, D))
        cat = np.zeros((batch_size, N), np.int64) if category is None else np.asarray(category)
        pts = self.points.data[cat] * (1.0 / _OFFSET_SCALE)      # (B, N, M, 2)
        return self.point_mlp(dk.Tensor(pts))

    def decode_level0(self, emb: dk.Tensor, enc: SceneEncoding) -> tuple[ModeSet, dk.Tensor]:
        own = enc.own_tokens()
        B, N, D = own.shape
        q = dk.add(dk.reshape(own, (B, N, 1, D)), emb)            # (B, N, M, D)
        z = self.level0.block(q, context=enc.context, mask=enc.mask[:, :, None, :])
        return self.level0.heads(z, enc.current, 0), z

    def encode_futures(self, prev: ModeSet) -> tuple[dk.Tensor, dk.Tensor]:
        """Mode features A_mf (B, N, M, D) and score-weighted agent features A_f (B, N, D)."""
        means, scores = prev.means, prev.scores
        if self.cfg.stop_gradient:
            means, scores = means.detach(), scores.detach()
        feat = self.future_mlp(means * _FUTURE_SCALE)              # (B, N, M, T, D)
        a_mf = dk.max_(feat, axis=-2)
        w = F.softmax(scores, axis=-1)
        a_f = dk.sum_(a_mf * dk.expand_dims(w, -1), axis=2)
        return a_mf, a_f

    def _decoder(self, k: int) -> InteractionDecoder:
        return self.interaction[0 if self.cfg.shared_decoder else k - 1]

    def future_interaction(self, a_f: dk.Tensor, agent_valid: np.ndarray, k: int) -> dk.Tensor:
        """Self-attention across agents' future features; invalid agents are masked keys."""
        return self._decoder(k).future_attn(a_f, mask=np.asarray(agent_valid)[:, None, :])

    def decode_levelk(self, z_prev, a_mf, a_f_att, enc: SceneEncoding, k: int) -> tuple[ModeSet, dk.Tensor]:
        dec = self._decoder(k)
        B, N, D = a_f_att.shape
        fut = dk.broadcast_to(dk.reshape(a_f_att, (B, 1, N, D)), (B, N, N, D))
        ctx = dk.concat([fut, enc.context], axis=2)                # (B, N, N + L, D)
        fut_mask = enc.agent_valid[:, None, :] & ~np.eye(N, dtype=bool)[None]
        mask = np.concatenate([fut_mask, enc.mask], axis=2)
        q = dk.add(z_prev, a_mf)
        z = dec.block(q, context=ctx, mask=mask[:, :, None, :])
        return dec.heads(z, enc.current, k), z

    def run_stack(self, enc: SceneEncoding, emb: dk.Tensor, levels: int | None = None) -> LevelStack:
        K = self.cfg.levels if levels is None else levels
        if K > self.cfg.levels:
            raise ValueError(f"model has {self.cfg.levels} interaction levels, {K} requested")
        stack = LevelStack()
        modes, z = self.decode_level0(emb, enc)
        stack.modesets.append(modes)
        stack.content.append(z)
        for k in range(1, K + 1):
            a_mf, a_f = self.encode_futures(modes)
            att = self.future_interaction(a_f, enc.agent_valid, k)
            modes, z = self.decode_levelk(z, a_mf, att, enc, k)
            stack.modesets.append(modes)
            stack.content.append(z)
        return stack

    def forward(self, batch: Batch, levels: int | None = None) -> tuple[SceneEncoding, LevelStack]:
        enc = self.encoder(batch)
        emb = self.modality_embedding(batch.size, batch.category)
        return enc, self.run_stack(enc, emb, levels)

    def most_likely(self, batch: Batch, levels: int | None = None):
        """Final-level highest-scoring mode mean per agent: (B, N, T, 2) and its probability."""
        with dk.no_grad():
            _, stack = self.forward(batch, levels)
        probs = stack.final.probs()
        best = probs.argmax(-1)
        means = stack.final.means.data.astype(np.float64)
        pick = np.take_along_axis(means, best[:, :, None, None, None], axis=2)[:, :, 0]
        return pick, np.take_along_axis(probs, best[..., None], -1)[..., 0]

    # -- persistence ----------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        from .diffkit import checkpoint
        meta = {"model_config": self.cfg.to_dict()}
        meta.update(extra or {})
        checkpoint.save(path, self.state_dict(), meta=meta)

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> "LevelKModel":
        from .diffkit import checkpoint
        arrays, header = checkpoint.load(path)
        saved = ModelConfig.from_dict(header["meta"]["model_config"])
        if cfg is not None and cfg != saved:
            diff = {k: (v, getattr(saved, k)) for k, v in cfg.to_dict().items() if getattr(saved, k) != v}
            raise ValueError(f"checkpoint/config mismatch (requested, saved): {diff}")
        model = cls(saved)
        model.load_state_dict(arrays)
        return model
