"""Tabular multi-turn preference optimization.

Exact solvers for the Nash equilibrium of KL-regularized preference games over
layered contextual MDPs (MTPO, MTPO-tau), multi-turn RLHF by mirror descent, and a
sampled actor-critic realization on softmax policies.
"""
__version__ = "0.1.0"

from .cmdp import (
    Cmdp,
    DegenerateRow,
    DimensionMismatch,
    ExplosionError,
    Policy,
    ReachProbs,
    SupportViolation,
    Trajectory,
    ValidationError,
    build_cmdp,
    enumerate_trajectories,
    geometric_mixture,
    make_policy,
    mixture_policy,
    reach_probabilities,
    sample_trajectory,
    trajectory_kl,
    validate_cmdp,
)
from .envs import gen_bt_chain, gen_random_cmdp, single_turn_instance
from .kernels import BACKEND
from .preference import (
    TerminalPreference,
    bt_preference,
    matrix_preference,
    policy_preference,
    regularized_preference,
    state_vs_policy_preference,
    validate_preference,
)
from .solvers import (
    BoundViolation,
    NashCertificate,
    NotConverged,
    SolverConfig,
    SolverTrace,
    lr_schedule,
    md_step,
    mtpo_iteration,
    mtpo_tau_iteration,
    nash_solve,
    rlhf_md_iteration,
    run,
)
from .values import (
    QTable,
    TerminalReward,
    VTable,
    exploitability,
    generic_qv,
    preference_qv,
    soft_best_response,
    value_difference_check,
)

