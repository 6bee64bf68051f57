"""Learned per-slice bandwidth and compute allocation under finite budgets."""

from .baseline import EqualSlicing, equal_slice
from .environment import (Allocation, Budgets, DemandStats, Mode, Scenario, SlicingEnv,
                          compute_budgets, project_to_budget)
from .learner import TrainConfig, evaluate, run_episode, train
from .policy import PolicyNet, forward, grad_log_prob, init_params, sample_action
from .workload import ClassSpec, EpisodeTrace, RequestEvent, Uniform, gen_synthetic_episode

__version__ = "0.1.0"
