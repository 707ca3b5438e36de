"""Reduce many marginal modes to a few, and combine two agents' modes into joint predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class JointEntry:
    index_a: int
    index_b: int
    confidence: float
    traj_a: np.ndarray | None = None
    traj_b: np.ndarray | None = None


def _canonical_order(trajs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    # sort by probability (descending) then trajectory content, so the result
    # does not depend on how the inputs were ordered
    flat = trajs.reshape(len(trajs), -1)
    keys = [flat[:, c] for c in range(flat.shape[1] - 1, -1, -1)] + [-probs]
    return np.lexsort(keys)


def _kmeanspp(ends: np.ndarray, weights: np.ndarray, k: int, rng) -> np.ndarray:
    first = int(rng.choice(len(ends), p=weights / weights.sum()))
    chosen = [first]
    d2 = ((ends - ends[first]) ** 2).sum(-1)
    for _ in range(1, k):
        w = weights * d2
        if w.sum() <= 0:
            idx = chosen[-1]
        else:
            idx = int(rng.choice(len(ends), p=w / w.sum()))
        chosen.append(idx)
        d2 = np.minimum(d2, ((ends - ends[idx]) ** 2).sum(-1))
    return np.array(chosen)


def em_reduce(trajs, probs, target: int = 6, sigma: float = 1.0, seed: int = 0,
              max_iter: int = 100, tol: float = 1e-6):
    """Fit a ``target``-component mixture of trajectory atoms to weighted input modes.

    trajs (M, T, 2), probs (M,). Components have isotropic per-step Gaussian
    kernels of scale ``sigma``. Returns (means (target, T, 2), probs (target,)),
    sorted by probability. Identical inputs collapse to copies of that
    trajectory with the mass split evenly.
    """
    trajs = np.asarray(trajs, np.float64)
    probs = np.asarray(probs, np.float64)
    if trajs.ndim != 3 or len(trajs) != len(probs):
        raise ValueError(f"trajs must be (M, T, D) matching probs, got {trajs.shape} and {probs.shape}")
    if not np.isclose(probs.sum(), 1.0, atol=1e-6) or np.any(probs < 0):
        raise ValueError(f"input probabilities must be a distribution (sum {probs.sum():.6g})")
    order = _canonical_order(trajs, probs)
    x, p = trajs[order], probs[order]
    M = len(x)
    rng = np.random.default_rng(seed)
    means = x[_kmeanspp(x[:, -1], np.maximum(p, 1e-300), target, rng)].copy()
    pi = np.full(target, 1.0 / target)
    resp = np.full((M, target), 1.0 / target)
    inv = 1.0 / (2.0 * sigma ** 2)
    for _ in range(max_iter):
        d2 = ((x[:, None] - means[None]) ** 2).sum(axis=(2, 3))          # (M, C)
        logits = np.log(np.maximum(pi, 1e-300))[None] - inv * d2
        logits -= logits.max(1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(1, keepdims=True)
        w = p[:, None] * r                                               # (M, C)
        mass = w.sum(0)
        for c in range(target):
            if mass[c] > 0:
                # update as an offset from the current mean so identical inputs stay exact
                means[c] = means[c] + np.tensordot(w[:, c], x - means[c], axes=1) / mass[c]
        pi = mass / mass.sum()
        change = float(np.abs(r - resp).max())
        resp = r
        if change < tol:
            break
    rank = np.argsort(-pi, kind="stable")
    out_p = pi[rank]
    return means[rank], out_p / out_p.sum()


def joint_top6(probs_a, probs_b, trajs_a=None, trajs_b=None, k: int = 6) -> list[JointEntry]:
    """Top-``k`` mode pairs by product of marginal probabilities; ties by (index_a, index_b)."""
    pa = np.asarray(probs_a, np.float64)
    pb = np.asarray(probs_b, np.float64)
    prod = pa[:, None] * pb[None, :]
    ia, ib = np.meshgrid(np.arange(len(pa)), np.arange(len(pb)), indexing="ij")
    order = np.lexsort((ib.ravel(), ia.ravel(), -prod.ravel()))[:k]
    out = []
    for flat in order:
        a, b = int(ia.ravel()[flat]), int(ib.ravel()[flat])
        out.append(JointEntry(a, b, float(prod[a, b]),
                              None if trajs_a is None else np.asarray(trajs_a)[a],
                              None if trajs_b is None else np.asarray(trajs_b)[b]))
    return out
