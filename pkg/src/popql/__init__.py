"""Projected off-policy Q-learning for finite MDPs with linear features."""

from .certificate import CertificateReport, certify, expected_f, f_matrix, td_error_bound, schur_equivalence_check
from .dual import DualConfig, DualState, ReweightingResult, dual_gradient, dual_objective, reweighting, solve_dual, stochastic_dual_step
from .features import FeatureMap, features, random_unit_features, three_state_basis
from .models import (
    DiscretePolicy,
    FiniteMDP,
    FiniteMRP,
    SampleDistribution,
    build_frozen_lake,
    build_three_state,
    exact_q,
    exact_value,
    mdp_to_mrp,
    stationary_distribution,
    three_state_mu,
)
from .policy import SoftmaxPolicy, TrainConfig, behavior_cloning, evaluate_policy, policy_gradient, train_popql
from .td import LinearValue, TDConfig, TDTrace, approx_error, lstd_fixed_point, run_td, td_step

__all__ = [
    "CertificateReport",
    "DiscretePolicy",
    "DualConfig",
    "DualState",
    "FeatureMap",
    "FiniteMDP",
    "FiniteMRP",
    "LinearValue",
    "ReweightingResult",
    "SampleDistribution",
    "SoftmaxPolicy",
    "TDConfig",
    "TDTrace",
    "TrainConfig",
    "approx_error",
    "behavior_cloning",
    "build_frozen_lake",
    "build_three_state",
    "certify",
    "dual_gradient",
    "dual_objective",
    "evaluate_policy",
    "exact_q",
    "exact_value",
    "expected_f",
    "f_matrix",
    "features",
    "td_error_bound",
    "lstd_fixed_point",
    "mdp_to_mrp",
    "policy_gradient",
    "random_unit_features",
    "reweighting",
    "run_td",
    "schur_equivalence_check",
    "solve_dual",
    "stochastic_dual_step",
    "stationary_distribution",
    "td_step",
    "three_state_basis",
    "three_state_mu",
    "train_popql",
]
