"""Reliability scores, sampling criteria and importance-sampling weights.

Everything here is a pure function of its inputs. The replay buffer calls
into this module to turn stored absolute TD errors into tree priorities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

PRIORITY_FLOOR = 1e-8


class Strategy(str, enum.Enum):
    UNIFORM = "uniform"
    PER = "per"
    REAPER = "reaper"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class PrioritizerConfig:
    """Exponents and schedule for one sampling strategy.

    ``omega = 0`` is accepted as the degenerate case in which REAPER
    collapses onto PER; the trained defaults live strictly inside (0, 1].
    """

    strategy: Strategy = Strategy.REAPER
    alpha: float = 0.4
    omega: float = 0.2
    beta_start: float = 0.4
    beta_end: float = 1.0
    priority_floor: float = PRIORITY_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if not (0.0 <= self.beta_start <= 1.0 and 0.0 <= self.beta_end <= 1.0):
            raise ValueError("beta endpoints must lie in [0, 1]")
        if self.beta_end < self.beta_start:
            raise ValueError("beta schedule must be non-decreasing")
        if self.priority_floor < 0:
            raise ValueError("priority_floor must be non-negative")

    @classmethod
    def for_strategy(cls, strategy: "str | Strategy", **overrides) -> "PrioritizerConfig":
        """Defaults per strategy: PER uses alpha=0.6, REAPER alpha=0.4 / omega=0.2."""
        strategy = Strategy.parse(strategy)
        base = {"strategy": strategy}
        if strategy is Strategy.PER:
            base["alpha"] = 0.6
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def beta(self, progress: float) -> float:
        """Linear annealing from ``beta_start`` to ``beta_end`` over progress in [0, 1]."""
        progress = min(max(progress, 0.0), 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * progress


def reliability_terminated(suffix_sum: float, episode_sum: float) -> float:
    """Reliability of a transition in a finished episode.

    ``1 - suffix_sum / episode_sum``; an episode with no residual error at
    all is treated as fully reliable.
    """
    if suffix_sum < 0 or episode_sum < 0:
        raise ValueError("TD error sums must be non-negative")
    if suffix_sum > episode_sum * (1 + 1e-12) + 1e-300:
        raise ValueError(f"suffix sum {suffix_sum} exceeds episode sum {episode_sum}")
    if episode_sum == 0:
        return 1.0
    return min(max(1.0 - suffix_sum / episode_sum, 0.0), 1.0)


def reliability_ongoing(prefix_sum_inclusive: float, max_episode_sum: float) -> float:
    """Conservative reliability for a transition of an episode still running.

    ``1 - (F - prefix) / F`` with F the largest episodic error mass in the
    buffer, clamped to [0, 1] because F may be stale relative to the prefix.
    """
    if prefix_sum_inclusive < 0:
        raise ValueError("prefix sum must be non-negative")
    if max_episode_sum <= 0:
        return 1.0
    return min(max(prefix_sum_inclusive / max_episode_sum, 0.0), 1.0)


def episode_reliabilities(abs_tdes, terminated: bool, max_episode_sum: float = 0.0) -> np.ndarray:
    """Vectorised reliabilities for every stored transition of one episode, in order."""
    abs_tdes = np.asarray(abs_tdes, dtype=float)
    if abs_tdes.size == 0:
        return abs_tdes.copy()
    prefix = np.cumsum(abs_tdes)
    if terminated:
        total = prefix[-1]
        if total <= 0:
            return np.ones_like(prefix)
        return np.clip(prefix / total, 0.0, 1.0)
    if max_episode_sum <= 0:
        return np.ones_like(prefix)
    with np.errstate(over="ignore"):
        return np.clip(prefix / max_episode_sum, 0.0, 1.0)


def criterion(reliability, abs_tde, config: PrioritizerConfig):
    """Sampling criterion Psi for the configured strategy (no floor added).

    Works elementwise on scalars or arrays.
    """
    reliability = np.asarray(reliability, dtype=float)
    abs_tde = np.asarray(abs_tde, dtype=float)
    if np.any(abs_tde < 0):
        raise ValueError("absolute TD errors must be non-negative")
    if np.any((reliability < 0) | (reliability > 1)):
        raise ValueError("reliability must lie in [0, 1]")
    strategy = config.strategy
    if strategy is Strategy.UNIFORM:
        out = np.ones(np.broadcast(reliability, abs_tde).shape)
    elif strategy is Strategy.PER:
        out = np.power(abs_tde, config.alpha) * np.ones_like(reliability)
    else:
        out = np.power(reliability, config.omega) * np.power(abs_tde, config.alpha)
    return float(out) if out.ndim == 0 else out


def normalize_priorities(criteria) -> np.ndarray:
    criteria = np.asarray(criteria, dtype=float)
    if np.any(criteria < 0):
        raise ValueError("criteria must be non-negative")
    total = criteria.sum()
    if total <= 0:
        return np.full(criteria.shape, 1.0 / criteria.size)
    return criteria / total


def importance_weights(priorities, n: int, beta: float, min_priority: float | None = None) -> np.ndarray:
    """Max-normalised importance-sampling weights ``(n p)^-beta / max_t w_t``.

    The maximum raw weight belongs to the smallest positive priority in the
    buffer; pass it as ``min_priority`` when ``priorities`` is only a batch.
    """
    priorities = np.asarray(priorities, dtype=float)
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if np.any(priorities <= 0):
        raise ValueError("zero-priority transitions cannot be sampled")
    if min_priority is None:
        min_priority = float(priorities.min())
    if beta == 0:
        return np.ones_like(priorities)
    raw = np.power(n * priorities, -beta)
    max_raw = (n * min_priority) ** (-beta)
    return raw / max_raw


def importance_weight(priority: float, n: int, beta: float, min_priority: float) -> float:
    return float(importance_weights([priority], n, beta, min_priority)[0])
