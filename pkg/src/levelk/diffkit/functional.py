"""Neural building blocks on top of the tensor primitives."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (
    GraphError,
    Tensor,
    _result,
    add,
    as_tensor,
    matmul,
    relu,
    reshape,
    sigmoid,
    tanh,
    transpose,
    unbroadcast,
    where,
)


def linear(x, W, b=None) -> Tensor:
    """Affine map ``x @ W + b`` over the last axis of ``x``.

    ``W`` has shape (d_in, d_out).
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise GraphError(f"weight must be 2-d, got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise GraphError(f"linear: input last extent {x.shape[-1]} != weight rows {W.shape[0]} "
                         f"(x {x.shape}, W {W.shape})")
    if b is not None and as_tensor(b).shape[-1] != W.shape[1]:
        raise GraphError(f"linear: bias extent {as_tensor(b).shape} != weight cols {W.shape[1]}")
    lead = x.shape[:-1]
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    elif x.ndim == 2:
        y = matmul(x, W)
    else:
        y = reshape(matmul(reshape(x, (-1, x.shape[-1])), W), lead + (W.shape[1],))
    return y if b is None else add(y, b)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    n = xd.shape[-1]

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, unbroadcast(g * xhat, gd.shape), unbroadcast(g, bias.shape)

    return _result(out.astype(xd.dtype), (x, gain, bias), bw)


def mlp(x, layers: Sequence[tuple], activation=None) -> Tensor:
    """Stack of affine layers given as ``(W, b)`` pairs; activation between layers only."""
    act = activation or relu
    h = as_tensor(x)
    for i, (W, b) in enumerate(layers):
        h = linear(h, W, b)
        if i < len(layers) - 1:
            h = act(h)
    return h


def max_pool(x, axis: int, window: int) -> Tensor:
    """Non-overlapping max over consecutive windows along ``axis``.

    Gradient goes to the first maximiser of each window.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n % window:
        raise GraphError(f"max_pool: extent {n} not divisible by window {window}")
    shape = x.shape[:axis] + (n // window, window) + x.shape[axis + 1:]
    return reshape(x, shape).max(axis=axis + 1)


def masked_fill_invalid(x, valid, fill) -> Tensor:
    """Replace entries where ``valid`` is false by the constant ``fill``."""
    x = as_tensor(x)
    return where(np.asarray(valid, bool), x, np.asarray(fill, dtype=x.dtype))


def multihead_attention(q, k, v, mask=None, heads: int = 1) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    q: (..., Lq, D), k/v: (..., Lk, D). ``mask`` is boolean, broadcastable to
    (..., Lq, Lk), True where attention is allowed. Disallowed logits are
    replaced by the most negative representable value before the softmax; query
    rows with no allowed key produce zero vectors.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    D = q.shape[-1]
    if D % heads or k.shape[-1] != D or v.shape[-1] % heads:
        raise GraphError(f"attention: feature dims {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]} "
                         f"incompatible with {heads} heads")
    dh = D // heads
    lead = q.shape[:-2]
    Lq, Lk = q.shape[-2], k.shape[-2]

    def split(t, L):
        t = reshape(t, t.shape[:-2] + (L, heads, t.shape[-1] // heads))
        nd = t.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(t, axes)  # (..., H, L, dh)

    qh, kh, vh = split(q, Lq), split(k, Lk), split(v, Lk)
    nd = kh.ndim
    kt = transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = matmul(qh, kt) * (1.0 / np.sqrt(dh))  # (..., H, Lq, Lk)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim < 2:
            m = m.reshape((1,) * (2 - m.ndim) + m.shape)
        m = np.expand_dims(m, -3)  # broadcast over heads
        try:
            m = np.broadcast_to(m, logits.shape)
        except ValueError as exc:
            raise GraphError(f"attention mask {np.shape(mask)} incompatible with logits "
                             f"{logits.shape[:-3] + logits.shape[-2:]}") from exc
        logits = where(m, logits, np.finfo(logits.dtype).min)
        alive = m.any(axis=-1, keepdims=True)
    w = softmax(logits, axis=-1)
    if mask is not None and not alive.all():
        w = where(np.broadcast_to(alive, w.shape), w, 0.0)
    out = matmul(w, vh)  # (..., H, Lq, dvh)
    nd = out.ndim
    out = transpose(out, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return reshape(out, lead + (Lq, v.shape[-1]))


def lstm_cell(x, h, c, W_ih, W_hh, b):
    """One LSTM step; gate order (input, forget, cell, output)."""
    gates = add(add(linear(x, W_ih), linear(h, W_hh)), b)
    H = h.shape[-1]
    i = sigmoid(gates[..., 0:H])
    f = sigmoid(gates[..., H:2 * H])
    g = tanh(gates[..., 2 * H:3 * H])
    o = sigmoid(gates[..., 3 * H:4 * H])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def recurrent_encode(seq, W_ih, W_hh, b, state=None) -> Tensor:
    """Run an LSTM over axis -2 of ``seq`` (..., T, d_in); return the final hidden state."""
    seq = as_tensor(seq)
    T = seq.shape[-2]
    if T == 0:
        raise GraphError("recurrent_encode: empty sequence")
    H = as_tensor(W_hh).shape[0]
    lead = seq.shape[:-2]
    if state is None:
        zeros = np.zeros(lead + (H,), dtype=seq.dtype)
        h, c = Tensor(zeros, dtype=seq.dtype), Tensor(zeros, dtype=seq.dtype)
    else:
        h, c = state
    for t in range(T):
        h, c = lstm_cell(seq[..., t, :], h, c, W_ih, W_hh, b)
    return h
