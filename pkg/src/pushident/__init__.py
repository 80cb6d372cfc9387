"""Per-cell mass and friction identification by pushing, and pre-grasp sliding.

A planar object is a grid of square cells with unknown per-cell mass and
friction. A few exploratory pushes yield an ensemble of parameter maps
weighted by how well each reproduces the observed motion; the planner then
pushes the object until it overhangs the table edge at a pose that the
ensemble considers unlikely to tip over.
"""

from .dynamics import (FrictionModel, Table, World, WorldConfig, balance_check, breakaway_force,
                       center_of_mass, line_breakaway, predict_velocity, solve_twist, step,
                       world_rollout)
from .experiment import synthetic_scene
from .errors import (EmptyObject, ExecutionDiverged, NoStableGoal, PlanningFailed,
                     PushIdentError, WorkspaceExceeded)
from .exploration import CandidateSet, ExploreConfig, sample_candidates, select_action
from .geometry import (BodyState, GridObject, ParamMap, PushAction, Trajectory, add_loss,
                       decompose_footprint, expand_state, fit_body)
from .identification import (IdentConfig, ModelEnsemble, infer_models, loss_gradient,
                             projected_update, run_identification_session, trajectory_loss)
from .io import Scene, load_ensemble, load_scene, save_ensemble, save_scene
from .pipeline import PipelineConfig, pregrasp_pipeline
from .planning import (GoalQuery, PlanConfig, PlanResult, failure_probability, robust_plan,
                       rrt_star, sample_stable_goal, select_push)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
