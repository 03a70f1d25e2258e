"""Q-learning with prioritized replay: tabular Watkins and linear double DQN.

:func:`train` interleaves acting, storing and replaying. Every
``replay_period`` environment steps it performs ``gradient_steps`` replay
updates, each of which samples a batch from the buffer, weights it by
importance sampling, applies one accumulated semi-gradient step and writes
the batch's absolute TD errors back so the buffer can refresh priorities.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .buffer import Batch, ReplayBuffer, Transition
from .envs import Environment, TabularEnvironment, solve_ground_truth
from .features import FourierFeatures, OneHotFeatures, cartpole_features
from .priority import PrioritizerConfig, Strategy

logger = logging.getLogger(__name__)

RUNLOG_COLUMNS = ["step", "episode", "eval_index", "score", "buffer_size",
                  "mean_abs_tde", "mean_reliability", "q_error_l2"]


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class InitSpec:
    """How a tabular Q table starts out.

    ``zeros`` and ``constant`` fill every entry; ``uniform`` draws entries
    from ``[low, high)``; ``stride`` writes ``value`` into every
    ``stride``-th state (1-based, so stride 2 hits states 2, 4, ...).
    Terminal rows are left at zero.
    """

    kind: str = "zeros"
    value: float = 1.0
    low: float = 0.0
    high: float = 1.0
    stride: int = 2

    def table(self, n_states: int, n_actions: int, rng: np.random.Generator,
              terminal_states=()) -> np.ndarray:
        if self.kind == "zeros":
            q = np.zeros((n_states, n_actions))
        elif self.kind == "constant":
            q = np.full((n_states, n_actions), float(self.value))
        elif self.kind == "uniform":
            q = rng.uniform(self.low, self.high, size=(n_states, n_actions))
        elif self.kind == "stride":
            q = np.zeros((n_states, n_actions))
            q[self.stride - 1::self.stride] = self.value
        else:
            raise ValueError(f"unknown init kind {self.kind!r}")
        for s in terminal_states:
            q[s] = 0.0
        return q


class TabularQ:
    representation = "tabular"

    def __init__(self, table: np.ndarray, learning_rate: float):
        self.table = np.asarray(table, dtype=float)
        self.learning_rate = learning_rate

    def values(self, states) -> np.ndarray:
        return self.table[np.asarray(states, dtype=np.int64)]

    def row(self, state) -> np.ndarray:
        return self.table[int(state)]

    def apply(self, states, actions, coeffs, max_norm: float = math.inf) -> None:
        delta = np.zeros_like(self.table)
        np.add.at(delta, (np.asarray(states, dtype=np.int64), np.asarray(actions)), coeffs)
        _clip(delta, max_norm)
        self.table += self.learning_rate * delta

    def copy(self) -> "TabularQ":
        return TabularQ(self.table.copy(), self.learning_rate)

    def full_table(self, n_states: int) -> np.ndarray:
        return self.table


class LinearQ:
    representation = "linear"

    def __init__(self, features, n_actions: int, learning_rate: float, weights=None):
        self.features = features
        self.learning_rate = learning_rate
        self.weights = np.zeros((features.dim, n_actions)) if weights is None else weights
        self._scale = getattr(features, "lr_scale", None)

    def values(self, states) -> np.ndarray:
        return self.features(states) @ self.weights

    def row(self, state) -> np.ndarray:
        return self.values(np.asarray(state)[None] if np.ndim(state) else [state])[0]

    def apply(self, states, actions, coeffs, max_norm: float = math.inf) -> None:
        phi = self.features(states)
        onehot = np.zeros((len(actions), self.weights.shape[1]))
        onehot[np.arange(len(actions)), actions] = coeffs
        delta = phi.T @ onehot
        _clip(delta, max_norm)
        if self._scale is not None:
            delta *= self._scale[:, None]
        self.weights += self.learning_rate * delta

    def copy(self) -> "LinearQ":
        return LinearQ(self.features, self.weights.shape[1], self.learning_rate, self.weights.copy())

    def full_table(self, n_states: int) -> np.ndarray:
        return self.values(np.arange(n_states))


def _clip(delta: np.ndarray, max_norm: float) -> None:
    if math.isfinite(max_norm):
        norm = float(np.linalg.norm(delta))
        if norm > max_norm:
            delta *= max_norm / norm


def td_errors(q, target_q, batch: Batch, gamma: float, double: bool = False) -> np.ndarray:
    """Bootstrapped TD errors ``r + gamma (1 - d) Q(s', .) - Q(s, a)`` for a batch.

    With ``double`` the bootstrap action is the online argmax and its value
    comes from ``target_q``; otherwise ``max_a target_q(s', a)``.
    """
    idx = np.arange(len(batch.actions))
    q_sa = q.values(batch.states)[idx, batch.actions]
    if double:
        best = np.argmax(q.values(batch.next_states), axis=1)
        bootstrap = target_q.values(batch.next_states)[idx, best]
    else:
        bootstrap = target_q.values(batch.next_states).max(axis=1)
    target = batch.rewards + gamma * (1.0 - batch.terminals) * bootstrap
    return target - q_sa


def td_error(q, target_q, transition: Transition, gamma: float, double: bool = False) -> float:
    batch = Batch(
        slots=np.array([transition.slot]),
        priorities=np.array([1.0]),
        states=np.asarray([transition.state]),
        actions=np.array([transition.action]),
        rewards=np.array([transition.reward], dtype=float),
        next_states=np.asarray([transition.next_state]),
        terminals=np.array([float(transition.terminated and not transition.truncated)]),
    )
    return float(td_errors(q, target_q, batch, gamma, double)[0])


def apply_batch(q, batch: Batch, deltas, weights, max_norm: float = math.inf):
    """One accumulated, importance-weighted semi-gradient step on ``q`` (in place)."""
    deltas = np.asarray(deltas, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if deltas.shape != weights.shape or deltas.shape[0] != len(batch.actions):
        raise ValueError("batch, deltas and weights must have equal length")
    if not (np.all(np.isfinite(deltas)) and np.all(np.isfinite(weights))):
        raise TrainingAborted("non-finite TD error or importance weight")
    q.apply(batch.states, batch.actions, weights * deltas, max_norm)
    return q


@dataclass
class TrainConfig:
    budget: int = 20_000
    batch_size: int = 32
    replay_period: int = 1
    warmup: int = 100
    gradient_steps: int = 1
    learning_rate: float = 0.1
    buffer_size: int = 10_000
    target_update_interval: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    n_evaluations: int = 20
    eval_episodes: int = 5
    eval_epsilon: float = 0.001
    max_grad_norm: float = math.inf
    weight_normalization: str = "batch"
    representation: str = "tabular"
    fourier_order: int = 3
    q_init: InitSpec = field(default_factory=InitSpec)
    stop_on_threshold: bool = False
    alpha: float | None = None
    omega: float | None = None
    beta_start: float | None = None
    beta_end: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.q_init, dict):
            self.q_init = InitSpec(**self.q_init)
        if self.batch_size < 1 or self.replay_period < 1 or self.gradient_steps < 1:
            raise ValueError("batch_size, replay_period and gradient_steps must be >= 1")
        if self.budget < self.warmup:
            raise ValueError("budget must be at least the warmup length")
        if self.representation not in ("tabular", "linear"):
            raise ValueError(f"unknown representation {self.representation!r}")

    def epsilon(self, step: int) -> float:
        horizon = max(self.eps_fraction * self.budget, 1.0)
        frac = min(step / horizon, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def prioritizer(self, strategy) -> PrioritizerConfig:
        return PrioritizerConfig.for_strategy(
            strategy, alpha=self.alpha, omega=self.omega,
            beta_start=self.beta_start, beta_end=self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


@dataclass
class RunLog:
    env_id: str
    strategy: str
    seed: int
    rows: list = field(default_factory=list)
    steps_to_threshold: int | None = None
    censored: bool = True
    steps_run: int = 0
    grad_steps: int = 0
    final_q_error: float | None = None
    final_q: np.ndarray | None = None
    uniform_fallbacks: int = 0

    @property
    def scores(self) -> list[float]:
        return [row["score"] for row in self.rows]

    @property
    def peak_score(self) -> float:
        return max(self.scores, default=float("nan"))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RUNLOG_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row[k]) for k in RUNLOG_COLUMNS})


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def q_error(q, env: TabularEnvironment, q_star: np.ndarray) -> float:
    """Squared Frobenius distance to Q* over all non-terminal state-action pairs."""
    states = env.decision_states()
    table = q.full_table(env.spec.state_count)
    return float(np.sum((table[states] - q_star[states]) ** 2))


def greedy_action(row: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(row == row.max())
    if best.size == 1:
        return int(best[0])
    return int(best[rng.integers(best.size)])


def epsilon_greedy(q, state, epsilon: float, rng: np.random.Generator, n_actions: int) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(n_actions))
    return greedy_action(q.row(state), rng)


def build_q(env: Environment, config: TrainConfig, rng: np.random.Generator):
    spec = env.spec
    if config.representation == "tabular":
        if not spec.enumerable:
            raise ValueError(f"tabular representation needs an enumerable env, not {env.env_id}")
        table = config.q_init.table(spec.state_count, spec.action_count, rng,
                                    getattr(env, "terminal_states", ()))
        return TabularQ(table, config.learning_rate)
    features = (OneHotFeatures(spec.state_count) if spec.enumerable
                else cartpole_features(config.fourier_order))
    return LinearQ(features, spec.action_count, config.learning_rate)


def evaluate(q, env: Environment, episodes: int, epsilon: float, rng: np.random.Generator) -> float:
    returns = []
    for _ in range(episodes):
        state = env.reset(rng)
        total = 0.0
        while True:
            action = epsilon_greedy(q, state, epsilon, rng, env.spec.action_count)
            out = env.step(action, rng)
            total += out.reward
            if out.terminated:
                break
            state = out.next_state
        returns.append(total)
    return float(np.mean(returns))


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent PCG64 streams for env dynamics, exploration, replay sampling and evaluation."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("env", "explore", "sample", "eval")
    return {name: np.random.Generator(np.random.PCG64(child)) for name, child in zip(names, children)}


def train(env: Environment, strategy, config: TrainConfig, seed: int | None = None,
          ground_truth=None, on_step=None, on_replay=None) -> RunLog:
    """Run one seeded training run and return its evaluation log.

    ``on_step(step, transition)`` sees every stored transition and
    ``on_replay(buffer, slots, deltas, q)`` runs after each replay update;
    both are observers for tests and diagnostics.
    """
    strategy = Strategy.parse(strategy)
    seed = config.seed if seed is None else seed
    streams = spawn_streams(seed)
    spec = env.spec
    pconfig = config.prioritizer(strategy)
    buffer = ReplayBuffer(config.buffer_size, pconfig)
    q = build_q(env, config, streams["explore"])
    double = q.representation == "linear"
    target = q.copy() if double else q
    if ground_truth is None and isinstance(env, TabularEnvironment):
        ground_truth = solve_ground_truth(env)
    eval_env = copy.deepcopy(env)
    log = RunLog(env_id=env.env_id, strategy=strategy.value, seed=seed)
    eval_every = max(1, config.budget // max(config.n_evaluations, 1))
    threshold = spec.reward_threshold

    state = env.reset(streams["env"])
    episode = 0
    grad_steps = 0
    step = 0
    for step in range(1, config.budget + 1):
        action = epsilon_greedy(q, state, config.epsilon(step), streams["explore"], spec.action_count)
        out = env.step(action, streams["env"])
        transition = Transition(state, action, out.reward, out.next_state, out.terminated, out.truncated)
        buffer.push(transition)
        if on_step is not None:
            on_step(step, transition)
        if out.terminated:
            episode += 1
            state = env.reset(streams["env"])
        else:
            state = out.next_state

        if step > config.warmup and step % config.replay_period == 0:
            beta = pconfig.beta(step / config.budget)
            for _ in range(config.gradient_steps):
                slots, probs = buffer.sample(config.batch_size, streams["sample"])
                weights = buffer.importance_weights(probs, beta, config.weight_normalization)
                batch = buffer.batch(slots, probs)
                deltas = td_errors(q, target, batch, spec.gamma, double)
                apply_batch(q, batch, deltas, weights, config.max_grad_norm)
                buffer.update_abs_tdes(slots, np.abs(deltas))
                buffer.refresh()
                grad_steps += 1
                if on_replay is not None:
                    on_replay(buffer, slots, deltas, q)
                if double and grad_steps % config.target_update_interval == 0:
                    target = q.copy()

        if config.n_evaluations and step % eval_every == 0:
            score = evaluate(q, eval_env, config.eval_episodes, config.eval_epsilon, streams["eval"])
            log.rows.append(_log_row(step, episode, len(log.rows), score, buffer, q, env, ground_truth))
            if threshold is not None and score >= threshold and log.steps_to_threshold is None:
                log.steps_to_threshold, log.censored = step, False
                if config.stop_on_threshold:
                    break

    if log.steps_to_threshold is None:
        log.steps_to_threshold, log.censored = config.budget, True
    log.steps_run = step
    log.grad_steps = grad_steps
    log.uniform_fallbacks = buffer.uniform_fallbacks
    if ground_truth is not None:
        log.final_q_error = q_error(q, env, ground_truth.q_star)
        log.final_q = q.full_table(spec.state_count).copy()
    return log


def _log_row(step, episode, eval_index, score, buffer: ReplayBuffer, q, env, ground_truth) -> dict:
    n = len(buffer)
    trained = ~buffer.fresh[:n]
    mean_abs = float(buffer.abs_tde[:n][trained].mean()) if trained.any() else 0.0
    return {
        "step": step,
        "episode": episode,
        "eval_index": eval_index,
        "score": score,
        "buffer_size": n,
        "mean_abs_tde": mean_abs,
        "mean_reliability": float(buffer.reliability[:n].mean()) if n else 1.0,
        "q_error_l2": q_error(q, env, ground_truth.q_star) if ground_truth is not None else None,
    }
