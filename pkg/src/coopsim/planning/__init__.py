"""Behavior and motion planning shared by the ego-only and cooperative modes."""

from coopsim.planning.config import PlannerConfig
from coopsim.planning.cost import evaluate_path_cost, predict_footprints
from coopsim.planning.envelope import VelocityEnvelope, compute_velocity_envelope, envelope_coop_dominance
from coopsim.planning.lateral import lateral_qp, linearize_clearance
from coopsim.planning.longitudinal import SpeedProfile, emergency_profile, longitudinal_qp
from coopsim.planning.planner import EgoState, PlanResult, Trajectory, plan_step
from coopsim.planning.qp import QPResult, kkt_residuals, solve_qp
from coopsim.planning.splines import LateralProfile, lateral_candidate, sample_lateral_candidates

__all__ = [
    "EgoState",
    "LateralProfile",
    "PlanResult",
    "PlannerConfig",
    "QPResult",
    "SpeedProfile",
    "Trajectory",
    "VelocityEnvelope",
    "compute_velocity_envelope",
    "emergency_profile",
    "envelope_coop_dominance",
    "evaluate_path_cost",
    "kkt_residuals",
    "lateral_candidate",
    "lateral_qp",
    "linearize_clearance",
    "longitudinal_qp",
    "plan_step",
    "predict_footprints",
    "sample_lateral_candidates",
    "solve_qp",
]
