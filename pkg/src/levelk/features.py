"""Turn ego-normalized scenarios into fixed-shape model batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene.frame import normalize
from .scene.types import CATEGORY, HEADING, X, Y, Scenario


@dataclass
class Batch:
    hist: np.ndarray          # (B, N, T_h + 1, 11)
    hist_valid: np.ndarray    # (B, N, T_h + 1)
    agent_valid: np.ndarray   # (B, N) valid at the current step
    lanes: np.ndarray         # (B, N, NL, Np, 15)
    lane_valid: np.ndarray
    crosswalks: np.ndarray    # (B, N, NC, Np, 3)
    crosswalk_valid: np.ndarray
    current: np.ndarray       # (B, N, 3) x, y, heading at t = 0
    category: np.ndarray      # (B, N) int
    gt: np.ndarray            # (B, N, T_f, 2)
    gt_valid: np.ndarray      # (B, N, T_f)
    routes: np.ndarray | None = None   # (B, R, 5)

    @property
    def size(self) -> int:
        return self.hist.shape[0]

    def select(self, idx) -> "Batch":
        return Batch(**{k: (None if v is None else v[idx]) for k, v in vars(self).items()})


def _agent_order(scn: Scenario, n_slots: int) -> np.ndarray:
    cur = scn.current
    ok = scn.valid[:, scn.n_hist]
    d = np.hypot(cur[:, X] - cur[0, X], cur[:, Y] - cur[0, Y])
    others = [k for k in np.argsort(d, kind="stable") if k != 0 and ok[k]]
    return np.array([0] + others[:n_slots - 1], dtype=np.int64)


def make_batch(scenarios: list[Scenario], n_agents: int, hist_steps: int, fut_steps: int,
               already_normalized: bool = False) -> Batch:
    """Stack scenarios, ego-normalized, into ``n_agents`` slots (ego first, then nearest).

    Missing agents are zero padding with every validity flag false.
    """
    cols = []
    for scn in scenarios:
        if not already_normalized:
            scn = normalize(scn)
        order = _agent_order(scn, n_agents)
        k = len(order)
        h, hv = scn.history(hist_steps)
        f, fv = scn.future(fut_steps)

        def pad(a, fill=0):
            out = np.full((n_agents,) + a.shape[1:], fill, dtype=a.dtype)
            out[:k] = a[order]
            return out

        hist = pad(h)
        hist_valid = pad(hv, False)
        hist[~hist_valid] = 0.0
        cols.append(dict(
            hist=hist, hist_valid=hist_valid, agent_valid=hist_valid[:, -1].copy(),
            lanes=pad(scn.lanes), lane_valid=pad(scn.lane_valid, False),
            crosswalks=pad(scn.crosswalks), crosswalk_valid=pad(scn.crosswalk_valid, False),
            current=hist[:, -1, [X, Y, HEADING]].copy(),
            category=np.argmax(hist[:, -1, CATEGORY], axis=-1) * hist_valid[:, -1],
            gt=pad(f[..., :2]), gt_valid=pad(fv, False), routes=scn.route))
    return Batch(**{key: np.stack([c[key] for c in cols]) for key in cols[0]})
