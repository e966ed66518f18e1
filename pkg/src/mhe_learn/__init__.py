"""Moving horizon estimation for constrained linear systems with online
parameter learning.

The package bundles a dense QP solver, KKT-based differentiation of the QP
solution map, a constrained moving horizon estimator whose state estimates
carry exact parameter sensitivities, a Kalman filter baseline, a plant
simulator for closed-loop experiments, and a projected-SGD learner that
adapts the model parameters from output-error losses.
"""

import logging

from .errors import (
    ConfigError,
    EpochError,
    EstimationError,
    MheLearnError,
    NumericalError,
    SamplingError,
)
from .linalg import SqrtmResult, inv_sqrtm_with_sens, riccati_step_with_sens
from .model import (
    AffineMatrixFamily,
    LtiModel,
    ParamBox,
    Polytope,
    TruncatedGaussian,
    load_model,
)
from .qp import QpProblem, QpSolution, SolverConfig, solve as solve_qp
from .qp_diff import QpDataSens, QpSolutionSens, differentiate
from .kf import KalmanFilter, run_kf_trajectory
from .mhe import (
    MheConfig,
    MheStepResult,
    MovingHorizonEstimator,
    build_qp,
    run_trajectory,
)
from .simulator import SafetyPolicy, SinusoidSchedule, control_input, plant_step, rollout
from .learner import (
    EpochRecord,
    LearnerConfig,
    run_learning,
    sample_loss_and_grad,
    sgd_update,
)

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"
