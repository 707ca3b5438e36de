import numpy as np
import pytest

import levelk.diffkit as dk
from levelk.features import make_batch
from levelk.model import LOG_SIGMA_MAX, LOG_SIGMA_MIN, LevelKModel, ModeSet, ModelConfig, reference_config
from levelk.scene import generate_scenario


def toy(**kw):
    base = dict(n_agents=3, modes=2, levels=2, d_model=16, fut_steps=5, hist_steps=5, seed=0)
    base.update(kw)
    return LevelKModel(ModelConfig(**base))


def toy_batch(n_agents=3, real=3, seeds=(0, 1)):
    scns = [generate_scenario(k, real, s) for k, s in zip(("intersection", "merge", "lane_change"), seeds)]
    return make_batch(scns, n_agents, 5, 5)


def test_invalid_agent_encodes_to_zero():
    m = toy(n_agents=4)
    b = toy_batch(n_agents=4, real=2)
    assert not b.agent_valid[:, 2:].any()
    with dk.no_grad():
        a = m.encoder.encode_histories(b.hist, b.hist_valid, b.agent_valid).data
    assert np.all(a[:, 2:] == 0)


def test_identical_histories_identical_encodings():
    m = toy()
    b = toy_batch()
    b.hist[:, 2] = b.hist[:, 1]
    b.hist_valid[:, 2] = b.hist_valid[:, 1]
    with dk.no_grad():
        a = m.encoder.encode_histories(b.hist, b.hist_valid, b.agent_valid).data
    assert np.array_equal(a[:, 1], a[:, 2])


def test_pooling_is_groupwise_max():
    m = toy()
    b = toy_batch()
    enc = m.encoder
    with dk.no_grad():
        tokens, gvalid = enc.encode_map(b.lanes, b.lane_valid, b.crosswalks, b.crosswalk_valid)
        from levelk.model import _LANE_SCALE
        feat = enc.lane_mlp(dk.Tensor((b.lanes * _LANE_SCALE).astype(np.float32))).data
    w = m.cfg.lane_pool
    B, N, P, Np, D = feat.shape
    G = Np // w
    for p in range(P):
        for g in range(G):
            sl = slice(g * w, (g + 1) * w)
            ok = b.lane_valid[:, :, p, sl]
            brute = np.where(ok[..., None], feat[:, :, p, sl], -np.inf).max(2)
            brute = np.where(ok.any(-1)[..., None], brute, 0.0)
            assert np.array_equal(tokens.data[:, :, p * G + g], brute.astype(np.float32))
    assert gvalid.shape == tokens.shape[:3]


def test_group_count_for_long_lane():
    cfg = ModelConfig(n_points=100, lane_pool=10, crosswalk_pool=20, n_lanes=1, n_crosswalks=0).validate()
    assert cfg.map_tokens == 10


def test_padding_noise_leaves_encoder_unchanged():
    """Criterion 3, first half: noise in padded tokens changes no valid output."""
    m = toy(n_agents=5)
    b = toy_batch(n_agents=5, real=3)
    rng = np.random.default_rng(0)
    noisy = b.select(np.arange(b.size))
    for arr, ok in ((noisy.hist, noisy.hist_valid), (noisy.lanes, noisy.lane_valid),
                    (noisy.crosswalks, noisy.crosswalk_valid)):
        arr[...] = np.where(ok[..., None], arr, rng.normal(scale=50, size=arr.shape))
    with dk.no_grad():
        e1, e2 = m.encoder(b), m.encoder(noisy)
        _, s1 = m(b)
        _, s2 = m(noisy)
    assert np.array_equal(e1.mask, e2.mask)
    assert np.array_equal(e1.context.data[e1.mask], e2.context.data[e1.mask])
    for a, c in zip(s1.modesets, s2.modesets):
        v = b.agent_valid
        assert np.array_equal(a.gmm.data[v], c.gmm.data[v])
        assert np.array_equal(a.scores.data[v], c.scores.data[v])


def test_masked_token_does_not_leak():
    m = toy()
    b = toy_batch()
    b2 = b.select(np.arange(b.size))
    b2.agent_valid = b.agent_valid.copy()
    b2.agent_valid[:, 2] = False
    b2.hist_valid = b.hist_valid.copy()
    b2.hist_valid[:, 2] = False
    b3 = b2.select(np.arange(b.size))
    b3.hist = b2.hist.copy()
    b3.hist[:, 2] += 100.0
    with dk.no_grad():
        c2, c3 = m.encoder(b2), m.encoder(b3)
    assert np.array_equal(c2.context.data, c3.context.data)


def test_non_ego_permutation_equivariance():
    """Criterion 3, second half: permuting non-ego agents permutes the encoding (1e-5, float32)."""
    m = toy(n_agents=4)
    b = toy_batch(n_agents=4, real=4)
    perm = np.array([0, 3, 1, 2])
    pb = b.select(np.arange(b.size))
    for name in ("hist", "hist_valid", "agent_valid", "lanes", "lane_valid", "crosswalks",
                 "crosswalk_valid", "current", "category", "gt", "gt_valid"):
        setattr(pb, name, getattr(b, name)[:, perm])
    with dk.no_grad():
        e, ep = m.encoder(b), m.encoder(pb)
    assert e.context.dtype == np.float32
    N = 4
    tok = np.r_[perm, np.arange(N, e.context.shape[2])]
    want = e.context.data[:, perm][:, :, tok]
    assert np.abs(ep.context.data - want).max() <= 1e-5
    assert np.array_equal(ep.mask, e.mask[:, perm][:, :, tok])


def test_reference_profiles_validate():
    p = reference_config("planning")
    assert (p.enc_layers, p.d_model, p.levels, p.modes) == (6, 256, 4, 6)
    q = reference_config("prediction")
    assert (q.levels, q.modes, q.intention_points) == (6, 64, True)
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3).validate()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"depth": 3})


# -- decoder -------------------------------------------------------------------

def test_stack_lengths_and_normalization():
    b = toy_batch()
    for K in (0, 1, 4):
        m = toy(levels=K)
        with dk.no_grad():
            _, s = m(b)
        assert len(s) == K + 1 and [ms.level for ms in s.modesets] == list(range(K + 1))
        for ms in s.modesets:
            assert ms.gmm.shape == (2, 3, 2, 5, 4)
            assert np.abs(ms.probs().sum(-1) - 1).max() <= 1e-5
            ls = ms.gmm.data[..., 2:]
            assert ls.min() >= LOG_SIGMA_MIN - 1e-6 and ls.max() <= LOG_SIGMA_MAX + 1e-6


def test_shared_decoder_reuses_weights():
    m = toy(levels=3, shared_decoder=True)
    assert len(m.interaction) == 1
    with dk.no_grad():
        _, s = m(toy_batch())
    assert len(s) == 4


def test_too_many_levels_requested():
    m = toy(levels=1)
    with pytest.raises(ValueError):
        m(toy_batch(), levels=2)


def test_level_dependencies():
    """Level 0 ignores interaction weights; level 2 depends on level 1's weights."""
    m = toy()
    b = toy_batch()
    with dk.no_grad():
        _, s0 = m(b)
        for p in m.interaction[0].parameters():
            p.data = p.data + 0.1
        _, s1 = m(b)
    assert np.array_equal(s0.modesets[0].gmm.data, s1.modesets[0].gmm.data)
    assert not np.array_equal(s0.modesets[1].gmm.data, s1.modesets[1].gmm.data)
    assert not np.array_equal(s0.modesets[2].gmm.data, s1.modesets[2].gmm.data)


def test_self_future_masking_exact():
    """Criterion 2: agent i's own attended-future token cannot reach agent i's level-k output."""
    b = toy_batch()
    rng = np.random.default_rng(0)
    for seed in range(3):
        m = toy(seed=seed)
        with dk.no_grad():
            _, ref = m(b)
        original = m.future_interaction
        for k in (1, 2):
            for i in range(3):
                def noisy(a_f, valid, level, i=i, k=k):
                    out = original(a_f, valid, level)
                    if level != k:
                        return out
                    d = out.data.copy()
                    d[:, i] = rng.normal(scale=10, size=d[:, i].shape)
                    return dk.Tensor(d)
                m.future_interaction = noisy
                with dk.no_grad():
                    _, pert = m(b)
                m.future_interaction = original
                assert np.array_equal(pert.modesets[k].gmm.data[:, i], ref.modesets[k].gmm.data[:, i])
                assert np.array_equal(pert.modesets[k].scores.data[:, i], ref.modesets[k].scores.data[:, i])
                others = [j for j in range(3) if j != i]
                assert not np.array_equal(pert.modesets[k].gmm.data[:, others], ref.modesets[k].gmm.data[:, others])


def _modeset(scores, seed=0):
    rng = np.random.default_rng(seed)
    B, N, M = scores.shape
    gmm = np.concatenate([rng.normal(scale=5, size=(B, N, M, 5, 2)), np.zeros((B, N, M, 5, 2))], -1)
    return ModeSet(dk.Tensor(gmm.astype(np.float32)), dk.Tensor(scores.astype(np.float32)), 0)


def test_encode_futures_pooling():
    m = toy()
    rng = np.random.default_rng(1)
    onehot = np.full((2, 3, 2), -1e4)
    onehot[..., 1] = 0.0
    with dk.no_grad():
        mf, af = m.encode_futures(_modeset(onehot))
        assert np.allclose(af.data, mf.data[:, :, 1], atol=1e-6)
        mf, af = m.encode_futures(_modeset(np.zeros((2, 3, 2))))
        assert np.allclose(af.data, mf.data.mean(2), atol=1e-6)
        s = rng.normal(size=(2, 3, 2))
        mf, af = m.encode_futures(_modeset(s))
    w = np.exp(s) / np.exp(s).sum(-1, keepdims=True)
    assert np.abs(af.data - (mf.data * w[..., None]).sum(2)).max() <= 1e-6


def test_future_interaction_masks_invalid_agents():
    m = toy()
    rng = np.random.default_rng(2)
    a = rng.normal(size=(1, 3, 16)).astype(np.float32)
    valid = np.array([[True, True, False]])
    b = a.copy()
    b[0, 2] += 50
    with dk.no_grad():
        oa = m.future_interaction(dk.Tensor(a), valid, 1).data
        ob = m.future_interaction(dk.Tensor(b), valid, 1).data
    assert np.array_equal(oa[0, :2], ob[0, :2])


def test_identical_agents_identical_modes():
    m = toy()
    b = toy_batch()
    for name in ("hist", "hist_valid", "lanes", "lane_valid", "crosswalks", "crosswalk_valid", "current"):
        getattr(b, name)[:, 2] = getattr(b, name)[:, 1]
    m.embedding.data[2] = m.embedding.data[1]
    with dk.no_grad():
        _, s = m(b)
    assert np.array_equal(s.modesets[0].gmm.data[:, 1], s.modesets[0].gmm.data[:, 2])


def test_intention_point_profile():
    pts = np.random.default_rng(0).normal(size=(3, 64, 2))
    m = LevelKModel(ModelConfig(n_agents=3, modes=64, levels=1, d_model=16, fut_steps=5, hist_steps=5,
                                intention_points=True, profile="prediction"), intention_points=pts)
    with dk.no_grad():
        _, s = m(toy_batch())
    assert s.final.gmm.shape[2] == 64
    with pytest.raises(ValueError):
        LevelKModel(ModelConfig(modes=6, intention_points=True), intention_points=np.zeros((3, 5, 2)))


def test_checkpoint_round_trip(tmp_path):
    m = toy()
    m.save(tmp_path / "m.ckpt")
    back = LevelKModel.load(tmp_path / "m.ckpt")
    b = toy_batch()
    with dk.no_grad():
        assert np.array_equal(m(b)[1].final.gmm.data, back(b)[1].final.gmm.data)
    with pytest.raises(ValueError, match="mismatch"):
        LevelKModel.load(tmp_path / "m.ckpt", cfg=ModelConfig(n_agents=3, modes=2, levels=1, d_model=16,
                                                                fut_steps=5, hist_steps=5))


def test_most_likely_picks_best_score():
    m = toy()
    b = toy_batch()
    pick, prob = m.most_likely(b)
    with dk.no_grad():
        _, s = m(b)
    best = s.final.probs().argmax(-1)
    assert pick.shape == (2, 3, 5, 2)
    assert np.allclose(pick[0, 1], s.final.means.data[0, 1, best[0, 1]])
    assert np.all((prob > 0) & (prob <= 1))
