"""Open-loop metrics as a function of the number of interaction levels."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .open_loop import eval_open_loop

METRICS = ("ade", "ade_1s", "ade_3s", "ade_5s", "fde", "collision_rate", "miss_rate", "pred_ade", "pred_fde")


def _load(entry):
    from ..model import LevelKModel
    if isinstance(entry, (str, Path)):
        if not Path(entry).exists():
            return None
        return LevelKModel.load(entry)
    return entry


def level_sweep(corpus, K_values, checkpoints: dict, out_csv=None, batch_size: int = 32) -> list[dict]:
    """One row per K: median over seeds of each open-loop metric.

    ``checkpoints`` maps K to a model, a checkpoint path, or a list of
    either (one per seed). K values without any usable checkpoint give a
    row with a note and empty metrics.
    """
    rows = []
    for K in K_values:
        entries = checkpoints.get(K, [])
        if not isinstance(entries, (list, tuple)):
            entries = [entries]
        models = [m for m in (_load(e) for e in entries) if m is not None]
        row = {"K": K, "n_seeds": len(models), "note": ""}
        if not models:
            row["note"] = "skipped: missing checkpoint"
            row.update({m: "" for m in METRICS})
            rows.append(row)
            continue
        reports = [eval_open_loop(m, corpus, batch_size=batch_size) for m in models]
        for key in METRICS:
            row[key] = float(np.median([getattr(r, key) for r in reports]))
            row[key + "_per_seed"] = ";".join(f"{getattr(r, key):.6g}" for r in reports)
        rows.append(row)
    if out_csv is not None:
        fields = ["K", "n_seeds", *METRICS, *(m + "_per_seed" for m in METRICS), "note"]
        with open(out_csv, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=fields, restval="")
            wr.writeheader()
            wr.writerows(rows)
    return rows
