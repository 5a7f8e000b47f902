"""Adaptive subpopulation-selection trials with synthetic controls."""

from syntax_design.env_sim import (
    Environment,
    FactorRegime,
    Mismatch,
    SimConfig,
    generate_environment,
    mean_response,
    sample_episode,
    true_positive_set,
)
from syntax_design.estimator import (
    EstimatorConfig,
    TrialState,
    UndefinedMean,
    Weights,
    lambda_oracle,
    naive_estimate,
    sensitivity_index,
    solve_beta,
    synthetic_estimate,
    variance_bound,
)
from syntax_design.harness import (
    ExperimentSpec,
    LambdaMode,
    allocation_proportion,
    fpr_tpr,
    run_experiment,
    run_trial,
)
from syntax_design.kernels import BACKEND as KERNEL_BACKEND
from syntax_design.policies import Policy, PolicyDecision, PolicyKind, SelectionResult, decide, finalize

__version__ = "0.1.0"
