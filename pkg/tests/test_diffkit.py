import numpy as np
import pytest

from levelk import diffkit as dk
from levelk.diffkit import checkpoint
from levelk.diffkit import functional as F


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_linear_zero_input_gives_bias():
    W = np.arange(6.0).reshape(2, 3)
    b = np.array([1.0, -2.0, 0.5])
    with dk.precision("float64"):
        y = dk.linear(np.zeros(2), W, b)
    np.testing.assert_array_equal(y.data, b)


def test_linear_identity():
    x = np.array([[1.5, -2.0, 3.0]])
    with dk.precision("float64"):
        y = dk.linear(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y.data, x)


def test_linear_shape_mismatch_reports_dims():
    with pytest.raises(dk.GraphError, match="3 != weight rows 4"):
        dk.linear(np.zeros((2, 3)), np.zeros((4, 5)))


@pytest.mark.parametrize("trial", range(10))
def test_linear_gradcheck(trial):
    r = np.random.default_rng(trial)
    err = dk.check_gradients(lambda x, W, b: dk.linear(x, W, b),
                             [r.normal(size=(4, 3)), r.normal(size=(3, 5)), r.normal(size=5)])
    assert err <= 1e-6


def test_softmax_uniform_and_shift():
    with dk.precision("float64"):
        y = dk.softmax(np.zeros((2, 5)))
        np.testing.assert_allclose(y.data, 0.2)
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_allclose(dk.softmax(x).data, dk.softmax(x + 100.0).data, rtol=1e-13)


def test_softmax_closed_form():
    with dk.precision("float64"):
        y = dk.softmax(np.array([0.0, np.log(2.0)]))
    np.testing.assert_allclose(y.data, [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_softmax_row_sums(rng):
    x = rng.normal(scale=5, size=(50, 7))
    with dk.precision("float64"):
        assert np.abs(dk.softmax(x).data.sum(-1) - 1).max() <= 1e-12
    y32 = dk.softmax(x.astype(np.float32))
    assert y32.dtype == np.float32
    assert np.abs(y32.data.sum(-1) - 1).max() <= 1e-5


@pytest.mark.parametrize("trial", range(10))
def test_softmax_family_gradcheck(trial):
    r = np.random.default_rng(100 + trial)
    x = r.normal(size=(3, 6))
    assert dk.check_gradients(lambda t: dk.softmax(t, axis=-1), [x]) <= 1e-5
    assert dk.check_gradients(lambda t: dk.log_softmax(t, axis=0), [x]) <= 1e-5


def test_attention_single_key_returns_value():
    r = np.random.default_rng(1)
    q, k, v = r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=(5, 4))
    mask = np.zeros((3, 5), bool)
    mask[:, 2] = True
    with dk.precision("float64"):
        out = dk.multihead_attention(q, k, v, mask, heads=2)
    np.testing.assert_allclose(out.data, np.broadcast_to(v[2], (3, 4)), atol=1e-15)


def test_attention_key_permutation_invariance(rng):
    q, k, v = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 6, 8)), rng.normal(size=(2, 6, 8))
    mask = rng.random((2, 3, 6)) > 0.3
    mask[..., 0] = True
    perm = rng.permutation(6)
    with dk.precision("float64"):
        a = dk.multihead_attention(q, k, v, mask, heads=2).data
        b = dk.multihead_attention(q, k[:, perm], v[:, perm], mask[..., perm], heads=2).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_masked_value_is_ignored_exactly(rng):
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    mask = np.array([True, False, True, True])
    a = dk.multihead_attention(q, k, v, mask, heads=4).data
    v2, k2 = v.copy(), k.copy()
    v2[1] = rng.normal(size=8) * 1e3
    k2[1] = rng.normal(size=8) * 1e3
    b = dk.multihead_attention(q, k2, v2, mask, heads=4).data
    assert np.array_equal(a, b)


def test_attention_all_masked_row_is_zero(rng):
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    mask = np.array([[True, True, False], [False, False, False]])
    out = dk.multihead_attention(q, k, v, mask, heads=1).data
    assert np.all(out[1] == 0)
    assert np.any(out[0] != 0)


def test_attention_rejects_bad_heads():
    with pytest.raises(dk.GraphError):
        dk.multihead_attention(np.zeros((2, 6)), np.zeros((2, 6)), np.zeros((2, 6)), heads=4)


@pytest.mark.parametrize("trial", range(10))
def test_attention_gradcheck(trial):
    r = np.random.default_rng(200 + trial)
    mask = r.random((3, 5)) > 0.3
    mask[:, 0] = True
    err = dk.check_gradients(lambda q, k, v: dk.multihead_attention(q, k, v, mask, heads=2),
                             [r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=(5, 4))])
    assert err <= 1e-5


@pytest.mark.parametrize("trial", range(10))
def test_layer_norm_mlp_gradcheck(trial):
    r = np.random.default_rng(300 + trial)
    x = r.normal(size=(4, 6))
    assert dk.check_gradients(lambda x, g, b: dk.layer_norm(x, g, b),
                              [x, r.normal(size=6), r.normal(size=6)]) <= 1e-5
    assert dk.check_gradients(
        lambda x, W1, b1, W2, b2: dk.mlp(x, [(W1, b1), (W2, b2)], activation=dk.tanh),
        [x, r.normal(size=(6, 5)), r.normal(size=5), r.normal(size=(5, 2)), r.normal(size=2)]) <= 1e-5


def test_max_pool_constant_and_ties():
    with dk.precision("float64"):
        x = dk.Tensor(np.full((2, 6, 3), 4.0), requires_grad=True)
        y = dk.max_pool(x, axis=1, window=3)
        np.testing.assert_array_equal(y.data, 4.0)
        y.sum().backward()
    g = x.grad
    # ties route to the lowest index of each window
    np.testing.assert_array_equal(g[:, [0, 3]], 1.0)
    np.testing.assert_array_equal(g[:, [1, 2, 4, 5]], 0.0)


def test_max_pool_matches_brute_force(rng):
    x = rng.normal(size=(3, 20, 4))
    y = dk.max_pool(x.astype(np.float32), axis=1, window=10).data
    ref = np.stack([x[:, i * 10:(i + 1) * 10].max(axis=1) for i in range(2)], axis=1)
    np.testing.assert_allclose(y, ref.astype(np.float32))


@pytest.mark.parametrize("trial", range(10))
def test_max_pool_gradcheck(trial):
    r = np.random.default_rng(400 + trial)
    assert dk.check_gradients(lambda x: dk.max_pool(x, axis=0, window=4), [r.normal(size=(8, 3))]) <= 1e-5


def test_recurrent_length_one_is_single_cell(rng):
    with dk.precision("float64"):
        lstm = dk.LSTM(3, 5, rng)
        seq = rng.normal(size=(2, 1, 3))
        h = lstm(seq).data
        z = dk.Tensor(np.zeros((2, 5)))
        h1, _ = dk.lstm_cell(seq[:, 0], z, z, lstm.W_ih, lstm.W_hh, lstm.b)
    np.testing.assert_array_equal(h, h1.data)


def test_recurrent_empty_rejected(rng):
    lstm = dk.LSTM(3, 4, rng)
    with pytest.raises(dk.GraphError):
        lstm(np.zeros((2, 0, 3)))


@pytest.mark.parametrize("trial", range(10))
def test_recurrent_gradcheck(trial):
    r = np.random.default_rng(500 + trial)
    err = dk.check_gradients(lambda s, Wi, Wh, b: dk.recurrent_encode(s, Wi, Wh, b),
                             [r.normal(size=(2, 4, 3)), 0.5 * r.normal(size=(3, 12)),
                              0.5 * r.normal(size=(3, 12)), r.normal(size=12)])
    assert err <= 1e-5


def test_backward_identity_and_square():
    with dk.precision("float64"):
        x = dk.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        seed = np.array([0.5, 2.0, -1.0])
        (x * 1.0).backward(seed)
        np.testing.assert_array_equal(x.grad, seed)
        x.zero_grad()
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_requires_reset():
    x = dk.Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    with pytest.raises(dk.GraphError, match="reset"):
        (x * x).sum().backward()
    x.zero_grad()
    (x * x).sum().backward()


def test_backward_seed_shape_checked():
    x = dk.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(dk.GraphError, match="seed shape"):
        (x * 2.0).backward(np.ones(3))


def test_backward_cycle_rejected():
    a = dk.Tensor([1.0], requires_grad=True)
    b = a * 2.0
    c = b * 3.0
    b._parents = (c,)  # forge a cycle
    with pytest.raises(dk.GraphError, match="cycle"):
        c.backward(np.ones(1))


def test_unused_leaf_gets_zero_gradient():
    x = dk.Tensor([1.0, 2.0], requires_grad=True)
    y = dk.Tensor([3.0], requires_grad=True)
    gx, gy = dk.grad((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy, 0.0)


def test_ops_gradcheck_elementwise(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    y = rng.normal(size=(1, 4))
    fns = [
        lambda a, b: dk.exp(a) * b + dk.log(a) / (b * b + 1.0),
        lambda a, b: dk.sqrt(a) - dk.sin(b) * dk.cos(a) + dk.tanh(a * b),
        lambda a, b: dk.sigmoid(a + b) * dk.softplus(b) - dk.gelu(a - b),
        lambda a, b: dk.cumsum(a * b, axis=1)[:, 1:] + dk.concat([a, b], axis=0)[1:].sum(0)[1:],
        lambda a, b: dk.stack([a, a * b], axis=1).reshape(3, 8).transpose() @ a,
        lambda a, b: dk.take_along_axis(a, np.array([[0, 0], [3, 1], [2, 2]]), axis=1) * 2.0,
        lambda a, b: dk.where(a.data > 1.0, a * b, -b) + dk.power(a, 3),
    ]
    for fn in fns:
        assert dk.check_gradients(fn, [x, y]) <= 1e-5


def test_solve_gradcheck(rng):
    A = rng.normal(size=(2, 4, 4)) + 4 * np.eye(4)
    b = rng.normal(size=(2, 4, 1))
    assert dk.check_gradients(lambda A, b: dk.solve(A, b), [A, b]) <= 1e-5


@pytest.mark.parametrize("trial", range(3))
def test_composite_encoder_gradcheck(trial):
    r = np.random.default_rng(600 + trial)
    block = dk.AttentionBlock(8, 2, r)
    lstm = dk.LSTM(3, 8, r)
    mask = np.ones((2, 5), bool)
    mask[1, 3:] = False

    def fn(seq, tokens):
        h = lstm(seq)
        ctx = dk.concat([dk.reshape(h, (2, 1, 8)), tokens], axis=1)
        return block(ctx, mask=mask[:, None, :])

    err = dk.check_module_gradients(block.parameters() + lstm.parameters(), fn,
                                    [r.normal(size=(2, 3, 3)), r.normal(size=(2, 4, 8))])
    assert err <= 1e-4


def test_adamw_and_clip(rng):
    p = dk.Parameter(np.array([1.0, -1.0], dtype=np.float64))
    p.grad = np.array([30.0, 40.0])
    n = dk.clip_grad_norm([p], 5.0)
    assert n == pytest.approx(50.0)
    assert np.linalg.norm(p.grad) <= 5.0 + 1e-9
    opt = dk.AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.1], atol=1e-6)


def test_checkpoint_roundtrip_and_errors(rng, tmp_path):
    arrays = {"a.W": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64)}
    blob = checkpoint.dumps(arrays, meta={"k": 2})
    out, header = checkpoint.loads(blob)
    assert header["format_version"] == checkpoint.FORMAT_VERSION
    assert header["precision"] == "float32"
    for k in arrays:
        np.testing.assert_array_equal(out[k], arrays[k])
        assert out[k].dtype == arrays[k].dtype
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"x" * 40)
    bad = blob.replace(b'"format_version": 1', b'"format_version": 9')
    with pytest.raises(checkpoint.CheckpointError, match="format_version"):
        checkpoint.loads(bad)


def test_determinism(rng):
    def run():
        r = np.random.default_rng(3)
        block = dk.AttentionBlock(8, 2, r)
        x = r.normal(size=(2, 5, 8)).astype(np.float32)
        return block(x).data
    assert np.array_equal(run(), run())


def test_jacobian_helper():
    with dk.precision("float64"):
        J = dk.jacobian(lambda x: dk.stack([x[0] * x[1], dk.sin(x[1])]), np.array([2.0, 0.5]))
    np.testing.assert_allclose(J, [[0.5, 2.0], [0.0, np.cos(0.5)]])
