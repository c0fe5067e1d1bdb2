"""Robust constrained policy optimization on tabular CMDPs."""

from .baselines import BaselineKind, cpo_update, pcpo_update
from .cmdp import (
    Kernel,
    Signal,
    StochasticPolicy,
    TabularCMDP,
    ValueBundle,
    evaluate_policy,
    make_random_cmdp,
    occupancy,
    policy_kl,
)
from .envs import EnvSpec, make_env, make_frozenlake, make_gambler, make_nchain
from .harness import ExperimentConfig, load_config, run_experiment
from .solver import (
    IterationRecord,
    RcpoConfig,
    bound_diagnostics,
    improvement_step,
    practical_update,
    projection_step,
    rcpo_train,
)
from .uncertainty import (
    Divergence,
    RobustEvalResult,
    UncertaintySet,
    kernel_value_gradient,
    project_kernel,
    robust_policy_evaluation,
    robust_value_iteration,
    support_min,
    worst_kernel_pgd,
)

__version__ = "0.1.0"
