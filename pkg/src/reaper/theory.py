"""Numeric checks of the convergence analysis behind reliability-adjusted replay.

Notation: for a sampled transition ``t`` with current estimate ``Q``,
optimal value ``Q*`` and bootstrapped target ``y``,

* ``e = Q - Q*`` is the true error,
* ``eps = y - Q*`` is the target bias,
* ``delta = y - Q = eps - e`` is the TD error.

A tabular step ``Q += eta * delta`` changes the squared error by
``(e + eta delta)^2 - e^2 = eta^2 delta^2 - 2 eta e^2 + 2 eta e eps``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .envs import ChainEnv, TabularEnvironment, make_env, solve_ground_truth
from .learner import TrainConfig, train
from .priority import Strategy, reliability_terminated

logger = logging.getLogger(__name__)


# misalignment --------------------------------------------------------------

@dataclass(frozen=True)
class Misalignment:
    inner_product: float
    closed_form: float
    residual: float


def _losses(theta, c, q_star, y):
    """TD loss (fixed target) and true loss of the one-parameter model ``Q = theta c``."""
    q = theta * c
    return (y - q) ** 2, (q_star - q) ** 2


def _gradients(theta, c, q_star, y):
    q = theta * c
    return -2.0 * (y - q) * c, -2.0 * (q_star - q) * c


def check_misalignment_identity(e: float, epsilon: float, grad_norm_sq: float = 1.0,
                                theta: float = 0.5) -> Misalignment:
    """Inner product of the TD-loss and true-loss gradients, computed two ways.

    The model is ``Q(theta) = theta c`` with ``c^2 = grad_norm_sq``; ``Q*``
    and the target ``y`` are placed so that the errors equal ``e`` and
    ``epsilon`` at ``theta``.
    """
    c = math.sqrt(grad_norm_sq)
    q = theta * c
    q_star = q - e
    y = q_star + epsilon
    g, g_star = _gradients(theta, c, q_star, y)
    inner = g * g_star
    closed = 4.0 * (e * e - e * epsilon) * grad_norm_sq
    return Misalignment(inner, closed, abs(inner - closed))


def finite_difference_gap(e: float, epsilon: float, grad_norm_sq: float = 1.0,
                          theta: float = 0.5, h: float = 1e-6) -> tuple[float, float]:
    """Largest absolute and relative gap between central differences and analytic gradients."""
    c = math.sqrt(grad_norm_sq)
    q_star = theta * c - e
    y = q_star + epsilon
    analytic = _gradients(theta, c, q_star, y)
    plus = _losses(theta + h, c, q_star, y)
    minus = _losses(theta - h, c, q_star, y)
    numeric = [(p - m) / (2 * h) for p, m in zip(plus, minus)]
    gaps = [abs(n - a) for n, a in zip(numeric, analytic)]
    rel = [gap / max(abs(a), 1e-300) for gap, a in zip(gaps, analytic)]
    return max(gaps), max(rel)


@dataclass
class MisalignmentReport:
    instances: int
    max_residual: float
    max_fd_abs: float
    max_fd_rel: float
    fd_failures: int

    def passed(self, residual_tol: float = 1e-12) -> bool:
        return self.max_residual <= residual_tol and self.fd_failures == 0


def misalignment_suite(instances: int = 1000, seed: int = 0, rtol: float = 1e-6,
                       atol: float = 1e-8) -> MisalignmentReport:
    """Random scalar instances; a finite-difference check fails when the gap exceeds ``atol + rtol |g|``."""
    rng = np.random.default_rng(seed)
    max_res = max_abs = max_rel = 0.0
    failures = 0
    for _ in range(instances):
        e, eps = rng.uniform(-2, 2, size=2)
        gn = rng.uniform(0.1, 4.0)
        theta = rng.uniform(-1, 1)
        m = check_misalignment_identity(e, eps, gn, theta)
        max_res = max(max_res, m.residual)
        c = math.sqrt(gn)
        q_star = theta * c - e
        analytic = _gradients(theta, c, q_star, q_star + eps)
        gap, rel = finite_difference_gap(e, eps, gn, theta)
        max_abs = max(max_abs, gap)
        max_rel = max(max_rel, rel)
        if gap > atol + rtol * max(abs(a) for a in analytic):
            failures += 1
    return MisalignmentReport(instances, max_res, max_abs, max_rel, failures)


# decomposition -------------------------------------------------------------

@dataclass
class ErrorDecomposition:
    tde_variance_term: float
    true_error_term: float
    bias_interaction_term: float

    @property
    def expected_change(self) -> float:
        return self.tde_variance_term - self.true_error_term + self.bias_interaction_term


@dataclass
class DecompositionCheck:
    closed_form: ErrorDecomposition
    monte_carlo_delta: float
    population: ErrorDecomposition
    samples: int

    @property
    def residual(self) -> float:
        return abs(self.closed_form.expected_change - self.monte_carlo_delta)


def transition_table(env: TabularEnvironment):
    """Every decision (state, action) pair with its deterministic successor."""
    rows = []
    for s in env.decision_states():
        for a in range(env.spec.action_count):
            ns, r, term = env.model(int(s), a)
            rows.append((int(s), a, ns, r, term))
    states, actions, nxt, rewards, terms = (np.array(col) for col in zip(*rows))
    return states, actions, nxt, rewards.astype(float), terms.astype(bool)


def _decompose(weights, e, eps, delta, eta) -> ErrorDecomposition:
    return ErrorDecomposition(
        tde_variance_term=float(eta ** 2 * np.sum(weights * delta ** 2)),
        true_error_term=float(2 * eta * np.sum(weights * e ** 2)),
        bias_interaction_term=float(2 * eta * np.sum(weights * e * eps)),
    )


def check_decomposition(env: TabularEnvironment, q: np.ndarray, mu, eta: float, samples: int,
                        rng: np.random.Generator, q_star: np.ndarray | None = None) -> DecompositionCheck:
    """Monte-Carlo mean of the realised squared-error change against the three-term form.

    Each sample draws one transition from ``mu``, applies ``Q += eta delta``
    on a copy and measures ``||Q' - Q*||^2 - ||Q - Q*||^2`` over the full
    table. The closed form is evaluated under the empirical frequencies of
    the drawn transitions, so the two sides differ only by rounding;
    ``population`` holds the same terms under ``mu`` itself.
    """
    if q_star is None:
        q_star = solve_ground_truth(env).q_star
    q = np.asarray(q, dtype=float)
    states, actions, nxt, rewards, terms = transition_table(env)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != states.shape or np.any(mu < 0) or not math.isclose(mu.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("mu must be a distribution over the decision transitions")
    gamma = env.spec.gamma
    y = rewards + gamma * np.where(terms, 0.0, q[nxt].max(axis=1))
    e = q[states, actions] - q_star[states, actions]
    eps = y - q_star[states, actions]
    delta = y - q[states, actions]

    draws = rng.choice(states.size, size=samples, p=mu)
    base = float(np.sum((q - q_star) ** 2))
    updated = np.broadcast_to(q, (samples,) + q.shape).copy()
    rows = np.arange(samples)
    updated[rows, states[draws], actions[draws]] += eta * delta[draws]
    realised = np.sum((updated - q_star) ** 2, axis=(1, 2)) - base

    counts = np.bincount(draws, minlength=states.size)
    mu_hat = counts / samples
    return DecompositionCheck(
        closed_form=_decompose(mu_hat, e, eps, delta, eta),
        monte_carlo_delta=float(realised.mean()),
        population=_decompose(mu, e, eps, delta, eta),
        samples=samples,
    )


@dataclass
class DecompositionReport:
    instances: int
    max_residual: float

    def passed(self, tol: float = 1e-9) -> bool:
        return self.max_residual <= tol


def decomposition_suite(instances: int = 1000, samples: int = 1000, seed: int = 0,
                        n_states: int = 5) -> DecompositionReport:
    """Random Q tables, sampling distributions, step sizes and discounts on a short chain."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        env = ChainEnv(n_states, gamma=float(rng.uniform(0.5, 1.0)))
        q_star = solve_ground_truth(env).q_star
        q = rng.uniform(-1.0, 2.0, size=q_star.shape)
        q[list(env.terminal_states)] = 0.0
        m = 2 * (n_states - 1)
        mu = rng.dirichlet(np.ones(m))
        eta = float(rng.uniform(0.01, 1.0))
        check = check_decomposition(env, q, mu, eta, samples, rng, q_star)
        worst = max(worst, check.residual)
    return DecompositionReport(instances, worst)


# reliability bound ---------------------------------------------------------

@dataclass(frozen=True)
class BiasModel:
    """Target biases bounded by ``lam`` times the downstream TD mass plus ``zeta``."""

    lam: float
    zeta: float
    epsilon: np.ndarray

    def __post_init__(self):
        if self.lam < 0 or self.zeta < 0:
            raise ValueError("lambda and zeta must be non-negative")

    @classmethod
    def sample(cls, deltas, lam: float, zeta: float, rng: np.random.Generator,
               tight: bool = False) -> "BiasModel":
        bound = lam * suffix_sums(deltas) + zeta
        scale = np.ones_like(bound) if tight else rng.uniform(0.0, 1.0, size=bound.size)
        sign = rng.choice([-1.0, 1.0], size=bound.size)
        return cls(lam, zeta, sign * scale * bound)


def suffix_sums(deltas) -> np.ndarray:
    """Sum of absolute TD errors strictly after each position."""
    d = np.abs(np.asarray(deltas, dtype=float))
    return np.concatenate((np.cumsum(d[::-1])[::-1][1:], [0.0]))


def check_reliability_bound(model: BiasModel, deltas) -> float:
    """Max of ``|eps_t| - (lam (1 - R_t) sum_i delta_i + zeta)``; at most 0 when the bound holds."""
    d = np.abs(np.asarray(deltas, dtype=float))
    total = float(d.sum())
    suffix = suffix_sums(d)
    rel = np.array([reliability_terminated(s, total) for s in np.minimum(suffix, total)])
    bound = model.lam * (1.0 - rel) * total + model.zeta
    return float(np.max(np.abs(model.epsilon) - bound))


@dataclass
class BoundReport:
    trajectories: int
    violations: int
    max_violation: float
    tight_max_violation: float


def bound_suite(trajectories: int = 10_000, seed: int = 0, max_len: int = 50,
                tol: float = 1e-12) -> BoundReport:
    """Random trajectories under the bias assumption; a quarter tight, a half with ``zeta > 0``.

    Rounding can push the tight cases a few ulps above the bound, so a
    violation is counted only beyond ``tol`` times the bound's scale.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    worst = tight_worst = -math.inf
    for i in range(trajectories):
        n = int(rng.integers(1, max_len + 1))
        deltas = rng.exponential(1.0, size=n) * (rng.random(n) > 0.2)
        lam = float(rng.uniform(0.0, 2.0))
        zeta = float(rng.uniform(0.0, 1.0)) if i % 2 else 0.0
        tight = i % 4 == 0
        model = BiasModel.sample(deltas, lam, zeta, rng, tight=tight)
        v = check_reliability_bound(model, deltas)
        scale = max(1.0, lam * float(np.sum(deltas)) + zeta)
        if v > tol * scale:
            violations += 1
        worst = max(worst, v)
        if tight:
            tight_worst = max(tight_worst, v)
    return BoundReport(trajectories, violations, worst, tight_worst)


def implied_bias_ratio(env: TabularEnvironment, q: np.ndarray, episode, q_star=None) -> np.ndarray:
    """Diagnostic: ``|eps_t| / sum_{i>t} |delta_i|`` along a recorded episode.

    ``episode`` is a sequence of ``(state, action, reward, next_state, terminal)``.
    Entries with an empty downstream mass are ``nan``.
    """
    if q_star is None:
        q_star = solve_ground_truth(env).q_star
    gamma = env.spec.gamma
    eps, delta = [], []
    for s, a, r, ns, term in episode:
        y = r + (0.0 if term else gamma * q[ns].max())
        eps.append(y - q_star[s, a])
        delta.append(y - q[s, a])
    suffix = suffix_sums(delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(suffix > 0, np.abs(eps) / suffix, np.nan)


# convergence hierarchy -----------------------------------------------------

HIERARCHY_ORDER = (Strategy.UNIFORM, Strategy.PER, Strategy.REAPER)


@dataclass
class HierarchyReport:
    env_id: str
    seeds: int
    errors: dict
    p_values: dict = field(default_factory=dict)
    wins: dict = field(default_factory=dict)

    @property
    def means(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.errors.items()}

    def passed(self, alpha: float = 0.05) -> bool:
        m = self.means
        ordered = all(m[a.value] >= m[b.value] for a, b in zip(HIERARCHY_ORDER, HIERARCHY_ORDER[1:]))
        return ordered and all(p < alpha for p in self.p_values.values())


def sign_test(worse, better) -> tuple[float, int, int]:
    """One-sided paired sign test that ``worse`` exceeds ``better``; ties are dropped."""
    diff = np.asarray(worse) - np.asarray(better)
    wins, losses = int(np.sum(diff > 0)), int(np.sum(diff < 0))
    if wins + losses == 0:
        return 1.0, 0, 0
    return float(stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue), wins, losses


# Random behavior (eps = 1) gives every strategy the same data stream, so only
# replay selection differs. The strided initialization plants spuriously
# correct values, echoing the low-reliability stylized condition.
_HIERARCHY_BASE = dict(eps_start=1.0, eps_end=1.0, alpha=1.0, omega=1.0, batch_size=1,
                       learning_rate=0.5, gradient_steps=4, buffer_size=2000, n_evaluations=0)
HIERARCHY_CONFIGS = {
    "chain:10": dict(_HIERARCHY_BASE, budget=600, warmup=300, q_init={"kind": "stride", "stride": 2}),
    "grid:5x5": dict(_HIERARCHY_BASE, budget=800, warmup=500, q_init={"kind": "stride", "stride": 2}),
}


def hierarchy_config(env_id: str, **overrides) -> TrainConfig:
    base = dict(HIERARCHY_CONFIGS.get(env_id, HIERARCHY_CONFIGS["chain:10"]))
    base.update(overrides)
    return TrainConfig(**base)


def _hierarchy_run(args):
    env_id, strategy, config, seed = args
    env = make_env(env_id)
    return train(env, strategy, config, seed=seed).final_q_error


def check_hierarchy(env_id: str, seeds: int = 100, config: TrainConfig | None = None,
                    jobs: int = 1, seed_offset: int = 0) -> HierarchyReport:
    """Final squared error to Q* for each strategy on shared seeds, with paired sign tests."""
    if seeds < 20:
        logger.warning("only %d seeds: the sign tests have little power", seeds)
    env = make_env(env_id)
    if not isinstance(env, TabularEnvironment):
        raise ValueError("the hierarchy check needs an enumerable environment")
    config = config or hierarchy_config(env_id)
    jobs_list = [(env_id, s.value, config, seed_offset + i) for s in HIERARCHY_ORDER for i in range(seeds)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            out = list(pool.map(_hierarchy_run, jobs_list, chunksize=8))
    else:
        out = [_hierarchy_run(j) for j in jobs_list]
    errors = {s.value: out[i * seeds:(i + 1) * seeds] for i, s in enumerate(HIERARCHY_ORDER)}
    report = HierarchyReport(env_id, seeds, errors)
    for a, b in zip(HIERARCHY_ORDER, HIERARCHY_ORDER[1:]):
        key = f"{a.value}>{b.value}"
        p, w, l = sign_test(errors[a.value], errors[b.value])
        report.p_values[key] = p
        report.wins[key] = (w, l)
    return report


# variance-optimal sampling -------------------------------------------------

class Infeasible(ValueError):
    pass


@dataclass(frozen=True)
class VarianceInstance:
    abs_tdes: np.ndarray
    target_variances: np.ndarray
    tau: float | None = None

    def __post_init__(self):
        d = np.asarray(self.abs_tdes, dtype=float)
        s = np.asarray(self.target_variances, dtype=float)
        if d.shape != s.shape or d.ndim != 1 or d.size == 0:
            raise ValueError("abs_tdes and target_variances must be equal-length vectors")
        if np.any(d < 0) or np.any(s <= 0):
            raise ValueError("need abs_tdes >= 0 and target_variances > 0")
        object.__setattr__(self, "abs_tdes", d)
        object.__setattr__(self, "target_variances", s)

    def closed_form(self) -> np.ndarray:
        w = self.abs_tdes / self.target_variances
        if w.sum() <= 0:
            return np.full(w.size, 1.0 / w.size)
        return w / w.sum()

    @property
    def level(self) -> float:
        """Constraint level; unless given, the one the closed form meets with equality."""
        return float(self.closed_form() @ self.abs_tdes) if self.tau is None else float(self.tau)

    def objective(self, mu) -> float:
        return float(np.asarray(mu) @ self.target_variances)


@dataclass
class VarianceSolution:
    closed_form: np.ndarray
    grid: np.ndarray
    tau: float
    closed_objective: float
    grid_objective: float

    @property
    def l1(self) -> float:
        return float(np.abs(self.closed_form - self.grid).sum())


def grid_minimize(abs_tdes, variances, tau: float, resolution: int = 1000,
                  slack: float = 1e-12) -> np.ndarray:
    """Exact minimizer of ``mu . variances`` over the simplex grid with step ``1 / resolution``
    subject to ``mu . abs_tdes >= tau``.

    All but the last two coordinates are enumerated; for each prefix the
    remaining units are split between the last two coordinates, where the
    objective and the constraint are both linear in the split, so the best
    split is an endpoint of its feasible integer interval. Ties keep the
    first prefix in lexicographic order.
    """
    d = np.asarray(abs_tdes, dtype=float)
    s = np.asarray(variances, dtype=float)
    n, M = d.size, resolution
    if tau > d.max() + slack:
        raise Infeasible(f"tau={tau:.6g} exceeds the largest TD error {d.max():.6g}")
    if n == 1:
        return np.ones(1)
    best_obj, best = math.inf, None
    head_dims = n - 2
    for prefix in _prefixes(head_dims, M):
        used = prefix.sum(axis=1)
        r = M - used
        base_d = prefix @ d[:head_dims] if head_dims else np.zeros(len(prefix))
        base_s = prefix @ s[:head_dims] if head_dims else np.zeros(len(prefix))
        da, db, sa, sb = d[-2], d[-1], s[-2], s[-1]
        # a units to coordinate n-2, r - a to n-1: need a (da - db) >= c
        c = tau * M - base_d - r * db - slack * M
        lo = np.zeros_like(r, dtype=float)
        hi = r.astype(float)
        if da > db:
            lo = np.maximum(lo, np.ceil(c / (da - db) - 1e-9))
        elif da < db:
            hi = np.minimum(hi, np.floor(c / (da - db) + 1e-9))
        else:
            hi = np.where(c <= 0, hi, -1.0)
        ok = lo <= hi
        if not ok.any():
            continue
        a = hi if sa < sb else lo
        obj = (base_s + a * sa + (r - a) * sb) / M
        obj = np.where(ok, obj, np.inf)
        i = int(np.argmin(obj))
        if obj[i] < best_obj - 1e-15:
            best_obj = float(obj[i])
            best = np.concatenate((prefix[i], [a[i], r[i] - a[i]])) / M
    if best is None:
        raise Infeasible("no grid point satisfies the constraint")
    return best


def _prefixes(dims: int, M: int):
    """Yield arrays of non-negative integer prefixes of length ``dims`` with sum <= M."""
    if dims == 0:
        yield np.zeros((1, 0), dtype=np.int64)
    elif dims == 1:
        yield np.arange(M + 1)[:, None]
    elif dims == 2:
        i, j = np.triu_indices(M + 1)
        # pairs (x, y) with x + y <= M: x = i, y = j - i
        yield np.stack((i, j - i), axis=1)
    else:
        raise ValueError("grid search is limited to at most 4 transitions")


def grid_minimize_brute(abs_tdes, variances, tau: float, resolution: int) -> tuple[float, np.ndarray]:
    """Enumerate every simplex grid point; meant for coarse grids in tests."""
    d = np.asarray(abs_tdes, dtype=float)
    s = np.asarray(variances, dtype=float)
    best_obj, best = math.inf, None
    for combo in itertools.product(range(resolution + 1), repeat=d.size - 1):
        rest = resolution - sum(combo)
        if rest < 0:
            continue
        mu = np.array(combo + (rest,)) / resolution
        if mu @ d >= tau - 1e-12 and mu @ s < best_obj - 1e-15:
            best_obj, best = float(mu @ s), mu
    if best is None:
        raise Infeasible("no grid point satisfies the constraint")
    return best_obj, best


def solve_optimal_mu(instance: VarianceInstance, resolution: int = 1000) -> VarianceSolution:
    """Closed-form ``mu ~ abs_tdes / variances`` next to the simplex-grid minimizer."""
    if instance.abs_tdes.size > 4:
        raise ValueError("grid search is limited to at most 4 transitions")
    tau = instance.level
    closed = instance.closed_form()
    grid = grid_minimize(instance.abs_tdes, instance.target_variances, tau, resolution)
    return VarianceSolution(closed, grid, tau, instance.objective(closed), instance.objective(grid))


@dataclass
class VarianceReport:
    instances: int
    within_tol: int
    max_l1: float
    closed_beats_grid: int
    solutions: list = field(default_factory=list, repr=False)

    def passed(self) -> bool:
        return self.within_tol == self.instances


def variance_suite(instances: int = 100, seed: int = 0, tol: float = 1e-2,
                   resolution: int = 1000) -> VarianceReport:
    """Random instances of dimension 2 to 4 with the constraint bound at the closed form."""
    rng = np.random.default_rng(seed)
    sols, variances = [], []
    for _ in range(instances):
        n = int(rng.integers(2, 5))
        inst = VarianceInstance(rng.uniform(0.1, 2.0, n), rng.uniform(0.1, 2.0, n))
        sols.append(solve_optimal_mu(inst, resolution))
        variances.append(inst.target_variances)
    l1 = [s.l1 for s in sols]
    # the closed form beating the grid by more than rounding would flag a grid bug
    beats = sum(s.closed_objective < s.grid_objective - s.closed_form.size * np.ptp(inst_var) / resolution
                for s, inst_var in zip(sols, variances))
    return VarianceReport(instances, int(sum(v <= tol for v in l1)), float(max(l1)), beats, sols)
