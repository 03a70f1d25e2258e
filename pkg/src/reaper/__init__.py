"""Reliability-adjusted prioritized experience replay with uniform and PER baselines."""

from .buffer import ReplayBuffer, Transition
from .envs import CartPoleEnv, ChainEnv, GridWorldEnv, make_env, solve_ground_truth
from .learner import RunLog, TrainConfig, train
from .priority import PrioritizerConfig, Strategy

__all__ = [
    "CartPoleEnv", "ChainEnv", "GridWorldEnv", "PrioritizerConfig", "ReplayBuffer", "RunLog",
    "Strategy", "TrainConfig", "Transition", "make_env", "solve_ground_truth", "train",
]
