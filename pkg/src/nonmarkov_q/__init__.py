"""Tabular Q-learning on recursively computed agent states.

Exact finite-chain oracles for the error decomposition of Q-learning run
on a non-Markov agent state, plus the tooling to check convergence and
concentration empirically.
"""

from ._backend import BACKEND
from .decomp import (
    BoundConstants,
    appendix_tail_check,
    decomp_step,
    delta_direct,
    dependence_matrices,
    omega_step,
    stationary_mean_zeta,
    theorem2_rhs,
)
from .embed import FeatureMap, cme_benchmark, fit_filter_operators, filter_update, run_filter
from .agent import Policy, Rcass, Trajectory, make_window_rcass, rcass_step, simulate
from .env import FiniteSpaces, HmmEnvironment, belief_update, env_step, observation_law
from .oracle import build_joint_chain, fixed_point_qstar, poisson_solve, singh_limit
from .qlearn import QTable, StepSchedule, q_update, run_qlearning

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BoundConstants",
    "FeatureMap",
    "FiniteSpaces",
    "HmmEnvironment",
    "Policy",
    "QTable",
    "Rcass",
    "StepSchedule",
    "Trajectory",
    "appendix_tail_check",
    "belief_update",
    "build_joint_chain",
    "cme_benchmark",
    "decomp_step",
    "delta_direct",
    "dependence_matrices",
    "env_step",
    "filter_update",
    "fit_filter_operators",
    "fixed_point_qstar",
    "make_window_rcass",
    "observation_law",
    "omega_step",
    "poisson_solve",
    "q_update",
    "rcass_step",
    "run_filter",
    "run_qlearning",
    "simulate",
    "singh_limit",
    "stationary_mean_zeta",
    "theorem2_rhs",
]
