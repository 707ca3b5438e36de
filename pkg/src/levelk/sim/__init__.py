"""Open-loop metrics, closed-loop log replay and the level sweep."""
from .closed_loop import (ClosedLoopReport, Observation, Rollout, brake_policy, model_closed_loop_policy,
                          replay_policy, run_closed_loop, start_state, write_reports)
from .collision import OrientedBox, any_overlap, collision_check, track_boxes
from .open_loop import MISS_THRESHOLD, OpenLoopReport, eval_open_loop, model_policy, oracle_policy
from .sweep import level_sweep
