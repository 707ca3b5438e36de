"""Open-loop planning and prediction metrics against logged futures."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ..features import make_batch
from ..planner.dynamics import headings
from ..scene.frame import normalize
from ..scene.types import HEADING, LENGTH, WIDTH, X, Y
from .collision import any_overlap, track_boxes

MISS_THRESHOLD = 4.5
HORIZONS_S = (1.0, 3.0, 5.0)
COLLISION_NOTE = "collision rate counts a scenario once if any planned step overlaps a logged agent"


@dataclass
class OpenLoopReport:
    ade: float
    ade_1s: float
    ade_3s: float
    ade_5s: float
    fde: float
    collision_rate: float
    miss_rate: float
    pred_ade: float
    pred_fde: float
    n_scenarios: int
    rows: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {k: v for k, v in vars(self).items() if k != "rows"}
        out["collision_denominator"] = "per scenario"
        return out

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# {COLLISION_NOTE}\n")
            if self.rows:
                wr = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
                wr.writeheader()
                wr.writerows(self.rows)
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2, sort_keys=True)


def model_policy(model, levels: int | None = None):
    """Final-level most-likely mode for every agent slot."""
    def policy(batch, scenarios):
        pick, _ = model.most_likely(batch, levels)
        return pick
    return policy


def oracle_policy(batch, scenarios):
    """Ground truth as the plan and as the predictions."""
    return batch.gt.astype(np.float64)


def _ade_until(err, valid, steps):
    e, v = err[:steps], valid[:steps]
    return float(e[v].mean()) if v.any() else float("nan")


def _nanmean(xs):
    xs = np.asarray(xs, np.float64)
    xs = xs[np.isfinite(xs)]
    return float(xs.mean()) if len(xs) else float("nan")


def eval_open_loop(policy, corpus, n_agents: int = 4, hist_steps: int = 10, fut_steps: int = 50,
                   batch_size: int = 32) -> OpenLoopReport:
    """Score ``policy`` on ``corpus``.

    ``policy(batch, scenarios)`` returns (B, N, T, 2) positions in the ego
    frame: slot 0 is the ego plan, the others are predictions. A model can
    be passed directly and is wrapped with :func:`model_policy`.
    """
    if hasattr(policy, "most_likely"):
        mc = policy.cfg
        n_agents, hist_steps, fut_steps = mc.n_agents, mc.hist_steps, mc.fut_steps
        policy = model_policy(policy)
    rows = []
    pred_ade, pred_fde = [], []
    for start in range(0, len(corpus), batch_size):
        scns = [normalize(s) for s in corpus[start:start + batch_size]]
        batch = make_batch(scns, n_agents, hist_steps, fut_steps, already_normalized=True)
        out = np.asarray(policy(batch, scns), np.float64)
        if out.shape[:2] != batch.gt.shape[:2] or out.shape[2] < fut_steps:
            raise ValueError(f"policy output {out.shape} does not cover batch {batch.gt.shape}")
        out = out[:, :, :fut_steps]
        err = np.hypot(*(out - batch.gt).transpose(3, 0, 1, 2))     # (B, N, T)
        for b, scn in enumerate(scns):
            gv = batch.gt_valid[b, 0]
            e = err[b, 0]
            dt = scn.dt
            row = {"index": start + b, "kind": scn.kind, "seed": scn.seed,
                   "ade": _ade_until(e, gv, fut_steps)}
            for h in HORIZONS_S:
                row[f"ade_{int(h)}s"] = _ade_until(e, gv, int(round(h / dt)))
            last = np.flatnonzero(gv)
            row["fde"] = float(e[last[-1]]) if len(last) else float("nan")
            row["miss"] = int(row["fde"] > MISS_THRESHOLD)
            # ego footprint along the plan vs every logged agent's future footprint
            cur = scn.current[0]
            plan = out[b, 0]
            hd = headings(np.vstack([cur[[X, Y]], plan]), theta_init=cur[HEADING])
            ego_rows = np.column_stack([plan, hd, np.full(fut_steps, cur[LENGTH]),
                                        np.full(fut_steps, cur[WIDTH])])
            fut, fv = scn.future(fut_steps)
            hit = any_overlap(ego_rows, track_boxes(fut[1:]), fv[1:])
            row["collision"] = int(hit.any())
            for k in range(1, n_agents):
                v = batch.gt_valid[b, k]
                if batch.agent_valid[b, k] and v.any():
                    ek = err[b, k]
                    pred_ade.append(float(ek[v].mean()))
                    pred_fde.append(float(ek[np.flatnonzero(v)[-1]]))
            rows.append(row)
    col = lambda key: _nanmean([r[key] for r in rows])
    return OpenLoopReport(
        ade=col("ade"), ade_1s=col("ade_1s"), ade_3s=col("ade_3s"), ade_5s=col("ade_5s"),
        fde=col("fde"), collision_rate=col("collision"), miss_rate=col("miss"),
        pred_ade=_nanmean(pred_ade), pred_fde=_nanmean(pred_fde), n_scenarios=len(rows), rows=rows)
