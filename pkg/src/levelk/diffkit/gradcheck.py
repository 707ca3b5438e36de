"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, precision


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """Elementwise max of |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of ``scale`` (default: the largest gradient magnitude in
    this array; at least 1e-7), so entries that are zero up to rounding do not
    dominate the ratio.
    """
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    if scale is None:
        scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
    floor = max(1e-3 * scale, 1e-7)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``grad`` and finite differences at 64-bit.

    ``fn`` maps Tensors to a Tensor; a random projection seed turns non-scalar
    outputs into a scalar objective.
    """
    rng = rng or np.random.default_rng(0)
    with precision("float64"):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        seed = rng.standard_normal(out.shape)
        analytic = grad(out, tensors, seed=seed)

        def scalar():
            return float((fn(*[Tensor(a) for a in arrays]).data * seed).sum())

        numeric = [numerical_grad(scalar, arr, eps) for arr in arrays]
    scale = _global_scale(analytic)
    return max((relative_error(a, n, scale) for a, n in zip(analytic, numeric)), default=0.0)


def _global_scale(grads) -> float:
    # identically-zero gradients (e.g. a bias under softmax) are judged against
    # the largest gradient anywhere, not their own rounding noise
    return max((float(np.abs(g).max(initial=0.0)) for g in grads), default=0.0)


def check_module_gradients(params: Sequence[Tensor], fn: Callable[..., Tensor],
                           inputs: Sequence[np.ndarray] = (), eps: float = 1e-6,
                           rng: np.random.Generator | None = None,
                           per_param: bool = False):
    """Like ``check_gradients`` but also differentiates w.r.t. module parameters.

    Parameters are cast to float64 in place. ``fn(*input_tensors)`` must read the
    parameters from the module itself. With ``per_param`` a dict of errors keyed
    by position is returned instead of the max.
    """
    rng = rng or np.random.default_rng(0)
    with precision("float64"):
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        seed = rng.standard_normal(out.shape)
        analytic = grad(out, list(tensors) + list(params), seed=seed)

        def scalar():
            return float((fn(*[Tensor(a) for a in arrays]).data * seed).sum())

        numeric = [numerical_grad(scalar, arr, eps) for arr in arrays + [p.data for p in params]]
    scale = _global_scale(analytic)
    errors = {i: relative_error(a, n, scale) for i, (a, n) in enumerate(zip(analytic, numeric))}
    return errors if per_param else max(errors.values(), default=0.0)
