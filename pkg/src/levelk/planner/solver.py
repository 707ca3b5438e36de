"""Damped Gauss-Newton with a fixed step and best-iterate tracking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffkit as dk


@dataclass
class GNResult:
    u: np.ndarray
    objective: float
    initial_objective: float
    best_iter: int
    iterations: int
    history: list = field(default_factory=list)
    warning: str | None = None


def _evaluate(residual_fn, u, jacobian):
    out = residual_fn(u)
    if isinstance(out, tuple):
        r, J = out
    else:
        r = out.data if isinstance(out, dk.Tensor) else out
        J = None
    r = np.asarray(r, np.float64)
    if J is None:
        if jacobian is not None:
            J = jacobian(u)
        else:
            # residual_fn must be written in diffkit ops for this path
            J = dk.jacobian(lambda t: dk.as_tensor(residual_fn(t), np.float64), u)
    return r, np.asarray(J, np.float64)


def gauss_newton(u0, residual_fn, max_iter: int = 30, step: float = 0.3, damping: float = 1e-8,
                 jacobian=None) -> GNResult:
    """Minimize ½‖r(u)‖² by u ← u − step·(JᵀJ + damping·I)⁻¹Jᵀr.

    ``residual_fn(u)`` returns ``r`` or ``(r, J)``. Without a Jacobian and
    without a ``jacobian`` callable, one is built by reverse passes through
    diffkit. The lowest-objective iterate seen (the start included) is
    returned; a singular or non-finite system stops early with a warning.
    """
    u = np.array(u0, dtype=np.float64).reshape(-1)
    n = len(u)
    best_u, best_f, best_i = u.copy(), np.inf, 0
    f0 = None
    history = []
    warning = None
    it = 0
    for it in range(max_iter + 1):
        try:
            r, J = _evaluate(residual_fn, u, jacobian)
        except FloatingPointError as exc:     # pragma: no cover - depends on residual_fn
            warning = f"residual evaluation failed at iteration {it}: {exc}"
            break
        f = 0.5 * float(r @ r)
        if not np.isfinite(f):
            warning = f"non-finite objective at iteration {it}"
            break
        history.append(f)
        if f0 is None:
            f0 = f
        if f < best_f:
            best_u, best_f, best_i = u.copy(), f, it
        if it == max_iter:
            break
        H = J.T @ J + damping * np.eye(n)
        g = J.T @ r
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            warning = f"singular normal equations at iteration {it}"
            break
        if not np.all(np.isfinite(delta)):
            warning = f"non-finite step at iteration {it}"
            break
        u = u - step * delta
    if f0 is None:
        f0 = np.inf
    return GNResult(best_u, best_f, f0, best_i, it, history, warning)


def gauss_newton_step_tensor(u, r, J, step: float, damping: float = 1e-8):
    """One differentiable batched update; u (B, n), r (B, m), J (B, m, n) Tensors."""
    n = u.shape[-1]
    Jt = dk.transpose(J, (0, 2, 1))
    H = dk.add(dk.matmul(Jt, J), damping * np.eye(n))
    g = dk.matmul(Jt, dk.expand_dims(r, -1))
    delta = dk.reshape(dk.solve(H, g), u.shape)
    return dk.sub(u, dk.mul(step, delta))
