"""Unknown-input state estimation by moving-horizon optimization.

Modules: :mod:`uise.model` (systems and simulation), :mod:`uise.crop` (the
crop-growth plant), :mod:`uise.detectability` (certificates and horizon
bounds), :mod:`uise.transform` (decoupling transforms and reduced models),
:mod:`uise.solver` and :mod:`uise.shooting` (window transcription and the
box-constrained solver), :mod:`uise.estimators` and :mod:`uise.experiment`.
"""
from .crop import CropParams, crop_model, crop_step, photosynthesis, unknown_input_truth
from .detectability import (
    ExpIossCertificate,
    LinearDetectReport,
    LyapunovCertificate,
    VerificationReport,
    check_exp_ioss,
    check_linear_strong_detectability,
    check_lyapunov_certificate,
    min_horizon_full_order,
    min_horizon_two_stage,
    two_stage_horizon,
)
from .estimators import Estimate, EstimatorConfig, EstimatorState, make_estimator, run_estimator
from .model import Box, SystemModel, Trajectory, sample_uniform_noise, simulate
from .shooting import CostSpec, Window, build_shooting_objective
from .solver import NlpProblem, Solution, SolverOptions, fd_gradient, solve_box_nlp
from .transform import (
    ReducedModel,
    StateTransform,
    build_affine_transform,
    project_estimate,
    recover_full_state,
    reduce_model,
)

__version__ = "0.1.0"
