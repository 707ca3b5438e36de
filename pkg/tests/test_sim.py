import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levelk.model import LevelKModel, ModelConfig
from levelk.planner import inverse_dynamics, forward_dynamics, initial_state
from levelk.scene import generate_corpus
from levelk.scene.frame import normalize
from levelk.scene.types import X, Y
from levelk.sim import (OrientedBox, brake_policy, collision_check, eval_open_loop, level_sweep,
                        oracle_policy, replay_policy, run_closed_loop, write_reports)
from levelk.sim.open_loop import MISS_THRESHOLD


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(20, 11)


def random_box(rng):
    return OrientedBox(*rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi), *rng.uniform(0.5, 5, 2))


# -- collision -------------------------------------------------------------

def _sat_margin(a, b):
    """Smallest signed gap over the four candidate axes (negative = separated)."""
    d = np.array([b.x - a.x, b.y - a.y])
    axes = []
    for h in (a.heading, b.heading):
        axes += [np.array([np.cos(h), np.sin(h)]), np.array([-np.sin(h), np.cos(h)])]
    out = np.inf
    for n in axes:
        r = 0.0
        for box in (a, b):
            u = np.array([np.cos(box.heading), np.sin(box.heading)])
            v = np.array([-np.sin(box.heading), np.cos(box.heading)])
            r += 0.5 * box.length * abs(u @ n) + 0.5 * box.width * abs(v @ n)
        out = min(out, r - abs(d @ n))
    return out


def _sample_inside(box, n, rng):
    loc = rng.uniform(-0.5, 0.5, (n, 2)) * [box.length, box.width]
    c, s = np.cos(box.heading), np.sin(box.heading)
    return np.c_[box.x + c * loc[:, 0] - s * loc[:, 1], box.y + s * loc[:, 0] + c * loc[:, 1]]


def test_sat_matches_point_sampling_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 1000:
        a, b = random_box(rng), random_box(rng)
        if abs(_sat_margin(a, b)) < 0.2:      # near-touch: the sampler cannot decide these
            continue
        mc = b.contains(_sample_inside(a, 20000, rng)).any() or a.contains(_sample_inside(b, 20000, rng)).any()
        assert collision_check(a, b) == mc
        checked += 1


def test_sat_trivial_cases():
    a = OrientedBox(1, 2, 0.4, 4.5, 2.0)
    assert collision_check(a, a)
    far = OrientedBox(1 + 5.0, 2, 1.0, 4.5, 2.0)
    assert not collision_check(a, far)
    touching = OrientedBox(0, 0, 0, 2, 2), OrientedBox(2, 0, 0, 2, 2)
    assert collision_check(*touching)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sat_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    assert collision_check(a, b) == collision_check(b, a)


def test_box_validation():
    with pytest.raises(ValueError):
        OrientedBox(0, 0, 0, 0.0, 1.0)
    with pytest.raises(ValueError):
        OrientedBox(np.nan, 0, 0, 1.0, 1.0)


# -- open loop ---------------------------------------------------------------

def test_oracle_plan_scores_zero(corpus):
    rep = eval_open_loop(oracle_policy, corpus)
    assert rep.ade == 0 and rep.fde == 0 and rep.miss_rate == 0
    assert rep.pred_ade == 0 and rep.pred_fde == 0
    assert rep.collision_rate == 0
    assert rep.n_scenarios == len(corpus)


def test_lateral_offset_misses(corpus):
    def shifted(batch, scns):
        out = batch.gt.astype(np.float64).copy()
        out[:, 0, :, 1] += 5.0
        return out
    rep = eval_open_loop(shifted, corpus)
    assert rep.miss_rate == 1.0
    assert rep.ade == pytest.approx(5.0, abs=1e-9)


def constant_velocity(batch, scns):
    hist = batch.hist[..., [X, Y]].astype(np.float64)
    vel = hist[:, :, -1] - hist[:, :, -2]
    steps = np.arange(1, batch.gt.shape[2] + 1)
    return hist[:, :, -1, None] + vel[:, :, None] * steps[None, None, :, None]


def test_matches_standalone_metric_script(corpus, tmp_path):
    rep = eval_open_loop(constant_velocity, corpus)
    # deliberately plain re-derivation straight from scenario arrays
    ade, fde, a1, a3, a5, miss = [], [], [], [], [], []
    for scn in corpus:
        n = normalize(scn)
        cur = n.tracks[0, n.n_hist, [X, Y]]
        prev = n.tracks[0, n.n_hist - 1, [X, Y]]
        fut = n.tracks[0, n.n_hist + 1:n.n_hist + 51][:, [X, Y]]
        ok = n.valid[0, n.n_hist + 1:n.n_hist + 51]
        plan = cur + (cur - prev) * np.arange(1, 51)[:, None]
        e = np.sqrt(((plan - fut) ** 2).sum(1))
        ade.append(e[ok].mean())
        a1.append(e[:10][ok[:10]].mean())
        a3.append(e[:30][ok[:30]].mean())
        a5.append(e[:50][ok[:50]].mean())
        fde.append(e[np.nonzero(ok)[0][-1]])
        miss.append(fde[-1] > 4.5)
    for got, want in [(rep.ade, ade), (rep.fde, fde), (rep.ade_1s, a1), (rep.ade_3s, a3),
                      (rep.ade_5s, a5), (rep.miss_rate, miss)]:
        assert abs(got - np.mean(want)) <= 1e-9


def test_horizon_errors_monotone_in_aggregate(corpus):
    rep = eval_open_loop(constant_velocity, corpus)
    assert rep.ade_1s <= rep.ade_3s <= rep.ade_5s
    assert 0 <= rep.collision_rate <= 1 and 0 <= rep.miss_rate <= 1


def test_report_files(corpus, tmp_path):
    rep = eval_open_loop(oracle_policy, corpus[:3])
    rep.write(tmp_path / "o.csv", tmp_path / "o.json")
    text = (tmp_path / "o.csv").read_text()
    assert text.startswith("# collision rate counts a scenario once")
    rows = list(csv.DictReader(text.splitlines()[1:]))
    assert len(rows) == 3
    assert MISS_THRESHOLD == 4.5


def test_bad_policy_shape(corpus):
    with pytest.raises(ValueError):
        eval_open_loop(lambda b, s: np.zeros((1, 1, 1, 2)), corpus[:2])


# -- closed loop -------------------------------------------------------------

def test_replay_reproduces_log(corpus):
    for scn in corpus:
        roll, rep = run_closed_loop(replay_policy, scn)
        assert rep.success == 1, rep.reason
        log = scn.tracks[0, scn.n_hist:scn.n_hist + len(roll.states)][:, [X, Y]]
        assert np.abs(roll.states[:, :2] - log).max() < 1e-6
        assert max(rep.pos_err_3s, rep.pos_err_5s, rep.pos_err_8s) < 1e-6
        logged = scn.tracks[0, scn.n_hist:][:, [X, Y]]
        from levelk.planner import project_to_reference
        p = project_to_reference(logged[:len(roll.states)], scn.route)
        assert rep.progress == pytest.approx(p.s[-1] - p.s[0], abs=1e-6)


def test_brake_makes_no_progress(corpus):
    for scn in corpus[:5]:
        roll, rep = run_closed_loop(brake_policy, scn)
        assert rep.progress < 1.0
        assert rep.success == int(not rep.collided)


def test_rollouts_deterministic(corpus, tmp_path):
    for scn in corpus[:5]:
        a, ra = run_closed_loop(replay_policy, scn)
        b, rb = run_closed_loop(replay_policy, scn)
        assert np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)
        assert ra == rb
        a.write(tmp_path / "a.csv")
        b.write(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_trace_shows_first_step_execution(corpus):
    scn = corpus[0]
    seen = []

    def spy(obs):
        plan = replay_policy(obs)
        seen.append((obs.step, obs.time, plan[0].copy()))
        return plan
    roll, rep = run_closed_loop(spy, scn)
    assert len(seen) == len(roll.controls) == rep.steps
    assert np.allclose(np.diff(roll.plan_times), 0.1, atol=1e-12)
    for i, (step, t, head) in enumerate(seen):
        assert step == i and t == pytest.approx(0.1 * i)
        assert np.abs(roll.states[i + 1, :2] - head).max() < 1e-6


def test_replan_interval_must_be_whole_steps(corpus):
    with pytest.raises(ValueError):
        run_closed_loop(replay_policy, corpus[0], replan_dt=0.15)
    roll, rep = run_closed_loop(replay_policy, corpus[0], replan_dt=0.3)
    assert np.allclose(np.unique(np.round(np.diff(roll.plan_times), 9)), [0.0, 0.3])


def test_policy_failure_marks_episode(corpus):
    def broken(obs):
        raise RuntimeError("planner crashed")
    _, rep = run_closed_loop(broken, corpus[0])
    assert rep.failed and rep.success == 0 and "planner crashed" in rep.reason
    _, rep = run_closed_loop(lambda obs: np.full((50, 2), np.nan), corpus[0])
    assert rep.failed


def test_termination_flags_exclusive(corpus):
    def veer(obs):
        # steer hard left at speed
        t = np.arange(1, 51) * 0.1
        th = obs.ego.theta + 0.8 * t
        return np.c_[obs.ego.x + np.cumsum(10 * np.cos(th) * 0.1), obs.ego.y + np.cumsum(10 * np.sin(th) * 0.1)]
    reports = [run_closed_loop(p, scn)[1] for scn in corpus for p in (veer, brake_policy, replay_policy)]
    assert any(r.off_route for r in reports)
    for r in reports:
        assert not (r.collided and r.off_route)
        assert r.success == int(not (r.collided or r.off_route or r.failed))
        assert r.progress >= -1e-9 or r.off_route


def test_executed_path_dynamically_consistent(corpus):
    for scn in corpus[:8]:
        roll, _ = run_closed_loop(replay_policy, scn)
        traj = roll.states[:, :2]
        u = inverse_dynamics(traj)
        back = forward_dynamics(initial_state(traj, u), u)
        assert np.abs(back[:, :2] - traj).max() <= 1e-9


def test_write_reports(corpus, tmp_path):
    reps = [run_closed_loop(replay_policy, s)[1] for s in corpus[:4]]
    summ = write_reports(reps, tmp_path / "c.csv", tmp_path / "c.json")
    assert summ["episodes"] == 4 and summ["success"] == 1.0
    assert len(list(csv.DictReader(open(tmp_path / "c.csv")))) == 4


# -- level sweep ---------------------------------------------------------------

def test_level_sweep_rows(corpus, tmp_path):
    models = {K: LevelKModel(ModelConfig(levels=K, fut_steps=50, seed=K)) for K in (0, 1)}
    rows = level_sweep(corpus[:4], [0, 1, 2], {0: models[0], 1: [models[1]], 2: str(tmp_path / "none.ckpt")},
                       out_csv=tmp_path / "sweep.csv")
    assert [r["K"] for r in rows] == [0, 1, 2]
    assert rows[2]["note"].startswith("skipped") and rows[2]["ade"] == ""
    for r in rows[:2]:
        assert all(np.isfinite(r[m]) for m in ("ade", "fde", "collision_rate", "miss_rate", "pred_ade"))
    assert len(list(csv.DictReader(open(tmp_path / "sweep.csv")))) == 3


def test_level_sweep_single_row(corpus):
    rows = level_sweep(corpus[:2], [0], {0: LevelKModel(ModelConfig(levels=0))})
    assert len(rows) == 1
