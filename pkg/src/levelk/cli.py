"""Command-line entry points.

Configuration is a JSON file whose sections mirror the config dataclasses;
anything missing takes its default, unknown keys are rejected, and flags
override file values. Every command writes only under ``--out`` and leaves
the fully resolved config there as ``config.resolved.json``.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CORPUS_ENV = "LEVELK_DATA"
DEFAULT_CORPUS = "corpus.jsonl"


class UsageError(Exception):
    """Bad flags, bad config, or a checkpoint that does not match the config."""


@dataclass
class DataConfig:
    n_scenarios: int = 200
    n_agents: int = 4
    seed: int = 0
    kinds: list = field(default_factory=lambda: ["intersection", "merge", "lane_change"])
    corpus: str = DEFAULT_CORPUS


@dataclass
class SimConfig:
    horizon_s: float = 8.0
    replan_dt: float = 0.1
    off_route_m: float = 5.0
    policy: str = "model"        # model | replay | brake
    refine: bool = False
    project: bool = False
    max_episodes: int | None = None


@dataclass
class RunConfig:
    profile: str = "planning"
    seed: int = 0
    out: str = "runs/default"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)

    def resolve(self) -> dict:
        """Every section with defaults filled in, validated."""
        from .model import ModelConfig
        from .objectives import TrainConfig
        from .planner import PlannerConfig, WeightLearnConfig
        if self.profile not in ("planning", "prediction"):
            raise UsageError(f"profile must be planning or prediction, got {self.profile!r}")
        try:
            model = asdict(ModelConfig(profile=self.profile, seed=self.seed))
            unknown = set(self.model) - set(model)
            if unknown:
                raise ValueError(f"unknown model keys {sorted(unknown)}")
            model.update(self.model)
            model = asdict(ModelConfig.from_dict(model).validate())
            train = asdict(TrainConfig.for_profile(self.profile, seed=self.seed))
            train.update(self.train)
            train = asdict(TrainConfig.from_dict(train))
            planner = asdict(PlannerConfig.from_dict(self.planner))
            weights = asdict(WeightLearnConfig.from_dict({"seed": self.seed, **self.weights}))
            data = _section(DataConfig, {"seed": self.seed, **self.data})
            sim = _section(SimConfig, self.sim)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        if sim["policy"] not in ("model", "replay", "brake"):
            raise UsageError(f"sim.policy must be model, replay or brake, got {sim['policy']!r}")
        return {"profile": self.profile, "seed": self.seed, "out": self.out, "model": model,
                "train": train, "planner": planner, "weights": weights, "data": data, "sim": sim}


def _section(cls, values: dict) -> dict:
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return asdict(cls(**values))


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**raw)


# ---------------------------------------------------------------------------
# helpers


class Workspace:
    """The output directory; every write goes through :meth:`path`."""

    def __init__(self, root: str):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts).resolve()
        if self.root != p and self.root not in p.parents:
            raise UsageError(f"refusing to write outside the output directory: {p}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _corpus_path(conf: dict, ws: Workspace | None = None) -> Path:
    p = Path(conf["data"]["corpus"])
    if p.is_absolute():
        return p
    root = os.environ.get(CORPUS_ENV)
    if root:
        return Path(root) / p
    if ws is not None and ws.path(p).exists():
        return ws.path(p)
    return p


def _load_corpus(conf: dict, ws: Workspace):
    from .scene.io import read_corpus
    path = _corpus_path(conf, ws)
    if not path.exists():
        raise UsageError(f"corpus {path} not found (generate it with gen-data or set {CORPUS_ENV})")
    return read_corpus(path)


def _load_model(path, conf: dict):
    from .model import LevelKModel, ModelConfig
    if path is None:
        raise UsageError("--checkpoint is required for this command")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return LevelKModel.load(path, ModelConfig.from_dict(conf["model"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_csv(path, rows, fields=None):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        wr = csv.DictWriter(fh, fieldnames=fields or list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(conf: dict, ws: Workspace, args) -> int:
    from .scene.generator import generate_corpus
    from .scene.io import content_hash, write_corpus
    d = conf["data"]
    corpus = generate_corpus(d["n_scenarios"], d["seed"], n_agents=d["n_agents"], kinds=tuple(d["kinds"]))
    write_corpus(ws.path(DEFAULT_CORPUS), corpus)
    digest = content_hash(corpus)
    ws.path("corpus_hash.txt").write_text(digest + "\n")
    print(f"wrote {len(corpus)} scenarios to {ws.path(DEFAULT_CORPUS)} (hash {digest})")
    return 0


def cmd_train(conf: dict, ws: Workspace, args) -> int:
    from .model import LevelKModel, ModelConfig
    from .objectives import TrainConfig, train
    corpus = _load_corpus(conf, ws)
    model = LevelKModel(ModelConfig.from_dict(conf["model"]))
    res = train(model, corpus, TrainConfig.from_dict(conf["train"]), log_path=ws.path("train_log.csv"))
    model.save(ws.path("model.ckpt"), extra={"train_config": conf["train"]})
    last = res.history[-1]["total"] if res.history else float("nan")
    print(f"trained {res.steps} steps, final loss {last:.4f}; checkpoint {ws.path('model.ckpt')}")
    return 1 if res.aborted else 0


def cmd_eval_open(conf: dict, ws: Workspace, args) -> int:
    from .sim.open_loop import eval_open_loop, oracle_policy
    corpus = _load_corpus(conf, ws)
    m = conf["model"]
    if args.oracle:
        rep = eval_open_loop(oracle_policy, corpus, m["n_agents"], m["hist_steps"], m["fut_steps"])
    else:
        rep = eval_open_loop(_load_model(args.checkpoint, conf), corpus)
    rep.write(ws.path("open_loop.csv"), ws.path("open_loop_summary.json"))
    print(json.dumps(rep.summary(), indent=2, sort_keys=True))
    return 0


def _closed_episode(job):
    index, scn, conf, ckpt = job
    from .planner import PlannerConfig
    from .sim.closed_loop import brake_policy, model_closed_loop_policy, replay_policy, run_closed_loop
    sim = conf["sim"]
    if sim["policy"] == "replay":
        policy = replay_policy
    elif sim["policy"] == "brake":
        policy = brake_policy
    else:
        model = _load_model(ckpt, conf)
        pc = PlannerConfig.from_dict({**conf["planner"], "horizon": conf["model"]["fut_steps"]})
        policy = model_closed_loop_policy(model, refine=sim["refine"], planner_cfg=pc, project=sim["project"])
    roll, rep = run_closed_loop(policy, scn, sim["horizon_s"], sim["replan_dt"], sim["off_route_m"],
                                conf["model"]["fut_steps"])
    return index, roll, rep


def cmd_sim_closed(conf: dict, ws: Workspace, args) -> int:
    from .sim.closed_loop import write_reports
    corpus = _load_corpus(conf, ws)
    if conf["sim"]["max_episodes"]:
        corpus = corpus[: conf["sim"]["max_episodes"]]
    if conf["sim"]["policy"] == "model":
        _load_model(args.checkpoint, conf)      # fail early on a bad checkpoint
    jobs = [(i, s, conf, args.checkpoint) for i, s in enumerate(corpus)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_closed_episode, jobs))
    else:
        results = [_closed_episode(j) for j in jobs]
    results.sort(key=lambda r: r[0])          # keyed merge: order does not depend on scheduling
    for i, roll, _ in results:
        roll.write(ws.path("traces", f"rollout_{i:05d}.csv"))
    summary = write_reports([r for _, _, r in results], ws.path("closed_loop.csv"),
                            ws.path("closed_loop_summary.json"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_refine_demo(conf: dict, ws: Workspace, args) -> int:
    from .features import make_batch
    from .planner import PlannerConfig, refine_plan
    from .planner.learn import ego_state
    from .scene.frame import normalize
    corpus = _load_corpus(conf, ws)
    if not 0 <= args.scenario_id < len(corpus):
        raise UsageError(f"scenario id {args.scenario_id} outside corpus of {len(corpus)}")
    scn = normalize(corpus[args.scenario_id])
    m = conf["model"]
    T = m["fut_steps"]
    state = ego_state(scn)
    if args.checkpoint:
        model = _load_model(args.checkpoint, conf)
        batch = make_batch([scn], m["n_agents"], m["hist_steps"], T, already_normalized=True)
        pick, _ = model.most_likely(batch)
        plan, others = pick[0, 0], pick[0, 1:]
        ovalid = np.repeat(batch.agent_valid[0, 1:, None], T, 1)
    else:
        # without a model: constant-velocity plan, logged futures for everyone else
        steps = np.arange(1, T + 1)[:, None] * scn.dt * state[3]
        plan = steps * [np.cos(state[2]), np.sin(state[2])] + state[:2]
        fut, fv = scn.future(T)
        others, ovalid = fut[1:, :, :2], fv[1:]
    pc = PlannerConfig.from_dict({**conf["planner"], "horizon": T})
    res = refine_plan(plan, state, scn.route, others, ovalid, pc)
    rows = [{"step": t + 1, "before_x": plan[t, 0], "before_y": plan[t, 1],
             "after_x": res.traj[t, 0], "after_y": res.traj[t, 1]} for t in range(T)]
    _write_csv(ws.path("refine_trajectories.csv"), rows)
    out = {"scenario": args.scenario_id, "cost_before": res.cost_before, "cost_after": res.cost_after,
           "objective_before": res.solve.initial_objective, "objective_after": res.solve.objective,
           "best_iteration": res.solve.best_iter, "warning": res.solve.warning}
    ws.path("refine_costs.json").write_text(json.dumps(out, indent=2, sort_keys=True))
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_grad_check(conf: dict, ws: Workspace, args) -> int:
    from .gradsuite import TOLERANCE, run_all
    rows = run_all()
    table = [{"check": r.name, "max_rel_error": f"{r.error:.3e}", "seconds": f"{r.seconds:.2f}",
              "status": "pass" if r.passed else "FAIL"} for r in rows]
    _write_csv(ws.path("grad_check.csv"), table)
    width = max(len(r.name) for r in rows)
    for t in table:
        print(f"{t['check']:<{width}}  {t['max_rel_error']}  {t['status']}")
    failed = [r.name for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks within {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_level_sweep(conf: dict, ws: Workspace, args) -> int:
    """Train one model per (K, seed) and tabulate open-loop metrics per K."""
    from .model import LevelKModel, ModelConfig
    from .objectives import TrainConfig, train
    from .sim.sweep import level_sweep
    corpus = _load_corpus(conf, ws)
    ks = args.k_levels if args.k_levels is not None else [0, 1, 2]
    seeds = range(conf["seed"], conf["seed"] + args.n_seeds)
    n_eval = max(1, len(corpus) // 5)
    train_set, eval_set = corpus[n_eval:], corpus[:n_eval]
    ckpts = {}
    for K in ks:
        ckpts[K] = []
        for s in seeds:
            mc = ModelConfig.from_dict({**conf["model"], "levels": K, "seed": s})
            model = LevelKModel(mc)
            train(model, train_set, TrainConfig.from_dict({**conf["train"], "seed": s}),
                  log_path=ws.path(f"K{K}_seed{s}", "train_log.csv"))
            path = ws.path(f"K{K}_seed{s}", "model.ckpt")
            model.save(path)
            ckpts[K].append(path)
    rows = level_sweep(eval_set, ks, ckpts, out_csv=ws.path("level_sweep.csv"))
    for r in rows:
        print(f"K={r['K']}: collision {r['collision_rate']}  pred ADE {r['pred_ade']}  {r['note']}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-open": cmd_eval_open,
    "sim-closed": cmd_sim_closed,
    "refine-demo": cmd_refine_demo,
    "grad-check": cmd_grad_check,
    "level-sweep": cmd_level_sweep,
}


def _k_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--k-levels takes comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("--k-levels needs non-negative integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levelk", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for per-scenario work")
        sp.add_argument("--profile", choices=["planning", "prediction"])
        sp.add_argument("--k-levels", type=_k_list, help="interaction levels, e.g. 2 or 0,1,2")
        sp.add_argument("--checkpoint", help="model checkpoint")
        if name == "eval-open":
            sp.add_argument("--oracle", action="store_true", help="score ground truth as the plan")
        if name == "refine-demo":
            sp.add_argument("--scenario-id", type=int, default=0)
        if name == "sim-closed":
            sp.add_argument("--policy", choices=["model", "replay", "brake"])
        if name == "level-sweep":
            sp.add_argument("--n-seeds", type=int, default=3)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = load_config(args.config)
        if args.seed is not None:
            rc.seed = args.seed
        if args.profile is not None:
            rc.profile = args.profile
        if args.out is not None:
            rc.out = args.out
        if args.k_levels is not None and args.command != "level-sweep":
            if len(args.k_levels) != 1:
                raise UsageError(f"{args.command} takes a single --k-levels value")
            rc.model = {**rc.model, "levels": args.k_levels[0]}
        if getattr(args, "policy", None):
            rc.sim = {**rc.sim, "policy": args.policy}
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        conf = rc.resolve()
        ws = Workspace(conf["out"])
        ws.path("config.resolved.json").write_text(json.dumps(conf, indent=2, sort_keys=True))
        return COMMANDS[args.command](conf, ws, args)
    except UsageError as exc:
        print(f"levelk {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"levelk {args.command}: check failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:    # anything else is a runtime failure, not a usage problem
        print(f"levelk {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
