"""Ego trajectory refinement: kinematics, residual costs, Gauss-Newton, projection, weight learning."""
from .cost import DEFAULT_WEIGHTS, TERMS, PlannerConfig, PlannerCost, RouteTable, build_residuals
from .dynamics import (ControlSequence, EgoDynamicState, forward_dynamics, headings, initial_state,
                       inverse_dynamics, rollout_tensor)
from .learn import (WeightExample, WeightLearnConfig, WeightLearnResult, ego_state, examples_from_corpus,
                    learn_weights, outer_loss, swerve_examples)
from .project import Projection, project_to_reference, route_frenet
from .refine import RefineResult, refine_plan
from .solver import GNResult, gauss_newton, gauss_newton_step_tensor
