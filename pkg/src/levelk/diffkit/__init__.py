"""Numpy tensor kernel with reverse-mode differentiation and the layers the model needs."""
from .tensor import (
    GraphError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    cos,
    cumsum,
    div,
    exp,
    expand_dims,
    gelu,
    get_default_dtype,
    getitem,
    grad,
    is_grad_enabled,
    log,
    matmul,
    max_,
    maximum,
    mean,
    mul,
    neg,
    norm,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    sin,
    softplus,
    solve,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    take_along_axis,
    tanh,
    transpose,
    where,
    zero_grad,
)
from .functional import (
    layer_norm,
    linear,
    log_softmax,
    lstm_cell,
    max_pool,
    mlp,
    multihead_attention,
    recurrent_encode,
    softmax,
)
from .nn import (
    LSTM,
    MLP,
    AdamW,
    AttentionBlock,
    Buffer,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    clip_grad_norm,
)
from .gradcheck import check_gradients, check_module_gradients, numerical_grad, relative_error


def jacobian(fn, x):
    """Dense Jacobian of ``fn`` at ``x`` by one reverse pass per output entry.

    ``fn`` maps a Tensor of shape (n,) to a Tensor of shape (m,); returns (m, n).
    """
    import numpy as np
    xt = Tensor(np.asarray(x), requires_grad=True, dtype=np.asarray(x).dtype)
    out = fn(xt)
    m = out.size
    J = np.zeros((m, xt.size), dtype=out.dtype)
    for i in range(m):
        seed = np.zeros(out.shape, dtype=out.dtype)
        seed.reshape(-1)[i] = 1.0
        J[i] = grad(out, [xt], seed=seed)[0].reshape(-1)
    return J
