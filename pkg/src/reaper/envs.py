"""Exactly solvable test environments plus classic cart-pole.

Every environment is a small state machine: ``reset(rng)`` returns the
initial state and ``step(action, rng)`` advances it. Enumerable
environments (chain, grid) use integer state ids and expose their
deterministic model so :func:`solve_ground_truth` can compute Q* by value
iteration.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np


class UnsupportedEnvironment(Exception):
    pass


@dataclass(frozen=True)
class EnvSpec:
    action_count: int
    gamma: float
    max_episode_length: int
    state_count: int | None = None
    feature_dim: int | None = None
    reward_threshold: float | None = None

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("need at least two actions")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_episode_length < 1:
            raise ValueError("max_episode_length must be >= 1")
        if (self.state_count is None) == (self.feature_dim is None):
            raise ValueError("exactly one of state_count / feature_dim must be set")

    @property
    def enumerable(self) -> bool:
        return self.state_count is not None


@dataclass(frozen=True)
class StepOutcome:
    next_state: object
    reward: float
    terminated: bool
    truncated: bool = False


@dataclass
class GroundTruth:
    q_star: np.ndarray
    v_star: np.ndarray
    residual: float


class Environment:
    spec: EnvSpec
    env_id: str

    def __init__(self):
        self.state = None
        self.steps = 0

    def reset(self, rng: np.random.Generator):
        self.steps = 0
        self.state = self._initial_state(rng)
        return self.state

    def step(self, action: int, rng: np.random.Generator | None = None) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.spec.action_count):
            raise ValueError(f"invalid action {action!r} for {self.env_id}")
        next_state, reward, terminal = self._transition(self.state, int(action), rng)
        self.steps += 1
        truncated = not terminal and self.steps >= self.spec.max_episode_length
        done = terminal or truncated
        self.state = None if done else next_state
        return StepOutcome(next_state, float(reward), done, truncated)

    def _initial_state(self, rng):
        raise NotImplementedError

    def _transition(self, state, action, rng):
        raise NotImplementedError


class TabularEnvironment(Environment):
    """Deterministic enumerable environment defined by a (next, reward, terminal) model."""

    terminal_states: frozenset = frozenset()

    def model(self, state: int, action: int) -> tuple[int, float, bool]:
        raise NotImplementedError

    def _transition(self, state, action, rng):
        return self.model(state, action)

    def decision_states(self) -> np.ndarray:
        return np.array([s for s in range(self.spec.state_count) if s not in self.terminal_states])


class ChainEnv(TabularEnvironment):
    """Corridor of ``n`` states; RIGHT from ``n - 2`` enters the terminal state with reward 1."""

    LEFT, RIGHT = 0, 1

    def __init__(self, n: int = 10, gamma: float = 1.0, max_episode_length: int | None = None):
        super().__init__()
        if n < 2:
            raise ValueError("chain needs at least two states")
        self.n = n
        self.env_id = f"chain:{n}"
        self.spec = EnvSpec(action_count=2, gamma=gamma, state_count=n,
                            max_episode_length=max_episode_length or 10 * n, reward_threshold=1.0)
        self.terminal_states = frozenset({n - 1})

    def _initial_state(self, rng):
        return 0

    def model(self, state, action):
        if state == self.n - 1:
            return state, 0.0, True
        nxt = state + 1 if action == self.RIGHT else max(state - 1, 0)
        terminal = nxt == self.n - 1
        return nxt, (1.0 if terminal else 0.0), terminal


class GridWorldEnv(TabularEnvironment):
    """Deterministic ``width x height`` grid from (0, 0) to the far corner; goal reward 1."""

    UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
    _MOVES = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}

    def __init__(self, width: int = 5, height: int = 5, gamma: float = 0.99,
                 max_episode_length: int | None = None):
        super().__init__()
        if width * height < 2:
            raise ValueError("grid needs at least two cells")
        self.width, self.height = width, height
        self.env_id = f"grid:{width}x{height}"
        self.goal = width * height - 1
        self.spec = EnvSpec(action_count=4, gamma=gamma, state_count=width * height,
                            max_episode_length=max_episode_length or 4 * width * height,
                            reward_threshold=1.0)
        self.terminal_states = frozenset({self.goal})

    def cell(self, state: int) -> tuple[int, int]:
        return state % self.width, state // self.width

    def _initial_state(self, rng):
        return 0

    def model(self, state, action):
        if state == self.goal:
            return state, 0.0, True
        x, y = self.cell(state)
        dx, dy = self._MOVES[action]
        x = min(max(x + dx, 0), self.width - 1)
        y = min(max(y + dy, 0), self.height - 1)
        nxt = y * self.width + x
        terminal = nxt == self.goal
        return nxt, (1.0 if terminal else 0.0), terminal


class CartPoleEnv(Environment):
    """Classic cart-pole balancing with Euler integration and the 12 degree / 2.4 m limits."""

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4

    def __init__(self, gamma: float = 0.99, max_episode_length: int = 500):
        super().__init__()
        self.env_id = "cartpole"
        self.spec = EnvSpec(action_count=2, gamma=gamma, feature_dim=4,
                            max_episode_length=max_episode_length, reward_threshold=475.0)

    def _initial_state(self, rng):
        return rng.uniform(-0.05, 0.05, size=4)

    @classmethod
    def dynamics(cls, state, action: int) -> np.ndarray:
        x, x_dot, theta, theta_dot = (float(v) for v in state)
        total_mass = cls.masspole + cls.masscart
        polemass_length = cls.masspole * cls.length
        force = cls.force_mag if action == 1 else -cls.force_mag
        costheta, sintheta = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot ** 2 * sintheta) / total_mass
        thetaacc = (cls.gravity * sintheta - costheta * temp) / (
            cls.length * (4.0 / 3.0 - cls.masspole * costheta ** 2 / total_mass))
        xacc = temp - polemass_length * thetaacc * costheta / total_mass
        x = x + cls.tau * x_dot
        x_dot = x_dot + cls.tau * xacc
        theta = theta + cls.tau * theta_dot
        theta_dot = theta_dot + cls.tau * thetaacc
        return np.array([x, x_dot, theta, theta_dot])

    def _transition(self, state, action, rng):
        nxt = self.dynamics(state, action)
        failed = abs(nxt[0]) > self.x_threshold or abs(nxt[2]) > self.theta_threshold
        return nxt, 1.0, failed


def make_env(env_id: str, **kwargs) -> Environment:
    """Build an environment from ``chain:<n>``, ``grid:<w>x<h>`` or ``cartpole``."""
    env_id = env_id.strip().lower()
    if m := re.fullmatch(r"chain:(\d+)", env_id):
        return ChainEnv(int(m.group(1)), **kwargs)
    if m := re.fullmatch(r"grid:(\d+)x(\d+)", env_id):
        return GridWorldEnv(int(m.group(1)), int(m.group(2)), **kwargs)
    if env_id == "cartpole":
        return CartPoleEnv(**kwargs)
    raise ValueError(f"unknown environment id {env_id!r}")


def solve_ground_truth(env: Environment, tol: float = 1e-10, max_iter: int = 100_000) -> GroundTruth:
    """Value iteration on an enumerable environment until the Bellman residual is below ``tol``."""
    if not isinstance(env, TabularEnvironment):
        raise UnsupportedEnvironment(f"{env.env_id} has no enumerable state space")
    spec = env.spec
    S, A = spec.state_count, spec.action_count
    nxt = np.zeros((S, A), dtype=np.int64)
    rew = np.zeros((S, A))
    cont = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            if s in env.terminal_states:
                nxt[s, a] = s
                continue
            ns, r, term = env.model(s, a)
            nxt[s, a], rew[s, a], cont[s, a] = ns, r, 0.0 if term else 1.0
    q = np.zeros((S, A))
    residual = np.inf
    for _ in range(max_iter):
        backup = rew + spec.gamma * cont * q[nxt].max(axis=2)
        residual = float(np.max(np.abs(backup - q)))
        q = backup
        if residual <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge (residual {residual:.3g})")
    residual = float(np.max(np.abs(rew + spec.gamma * cont * q[nxt].max(axis=2) - q)))
    return GroundTruth(q_star=q, v_star=q.max(axis=1), residual=residual)
