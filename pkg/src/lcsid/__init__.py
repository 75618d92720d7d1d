"""Identification of discrete-time linear complementarity systems."""

from .data import Dataset, SamplingRanges, Transition, count_modes, read_dataset, sample_dataset, write_dataset
from .errors import (
    DegenerateSolutionError,
    FormatError,
    GammaWindowError,
    LcsidError,
    SolverError,
)
from .evaluate import EvalReport, ExperimentGrid, evaluate, run_experiment
from .lcp import LcpSolution, classify_strict, lcp_sensitivity, solve_lcp
from .loss import (
    InnerSolution,
    LossGradient,
    LossHessian,
    inner_solve,
    prediction_loss,
    prediction_loss_grad,
    regularizer,
    violation_loss,
    violation_loss_grad,
    violation_loss_hessian,
)
from .model import (
    Dims,
    FParam,
    LcsParams,
    StiffnessSpec,
    load_params,
    materialize_f,
    random_lcs,
    save_params,
    simulate_step,
)
from .qp import NonnegQp, QpSolution, enumerate_oracle, solve_nonneg_qp
from .train import AdamState, TrainConfig, TrainHistory, adam_step, init_params, train

__version__ = "0.1.0"
