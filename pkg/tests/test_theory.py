import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from reaper.envs import ChainEnv, solve_ground_truth
from reaper.theory import (
    BiasModel,
    Infeasible,
    VarianceInstance,
    check_decomposition,
    check_hierarchy,
    check_misalignment_identity,
    check_reliability_bound,
    decomposition_suite,
    finite_difference_gap,
    grid_minimize,
    grid_minimize_brute,
    hierarchy_config,
    implied_bias_ratio,
    sign_test,
    solve_optimal_mu,
    suffix_sums,
    transition_table,
)


@pytest.mark.parametrize("e,eps,expected", [(1.0, 0.0, 4.0), (1.0, 2.0, -4.0), (0.0, 3.7, 0.0)])
def test_misalignment_examples(e, eps, expected):
    m = check_misalignment_identity(e, eps, 1.0)
    assert m.inner_product == pytest.approx(expected, abs=1e-12)
    assert m.residual <= 1e-12


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 4), st.floats(-1, 1))
def test_misalignment_identity_property(e, eps, gn, theta):
    m = check_misalignment_identity(e, eps, gn, theta)
    assert m.residual <= 1e-12 * max(1.0, abs(m.closed_form))
    gap, _ = finite_difference_gap(e, eps, gn, theta)
    assert gap <= 1e-6 * max(1.0, abs(e) + abs(eps)) * 10


def _single(env, q, index):
    mu = np.zeros(transition_table(env)[0].size)
    mu[index] = 1.0
    return mu


def test_decomposition_zero_tde_transition():
    env = ChainEnv(4, gamma=1.0)
    q_star = solve_ground_truth(env).q_star
    q = q_star.copy()
    q[0, 1] = 0.3
    # (state 1, RIGHT) has target q*(2,.) = 1 and value 1: delta = 0 although e on another pair is not 0
    states, actions, *_ = transition_table(env)
    idx = int(np.flatnonzero((states == 1) & (actions == ChainEnv.RIGHT))[0])
    chk = check_decomposition(env, q, _single(env, q, idx), 0.5, 50, np.random.default_rng(0), q_star)
    assert chk.monte_carlo_delta == 0.0 and chk.closed_form.expected_change == 0.0


def test_decomposition_error_eliminated():
    env = ChainEnv(4, gamma=1.0)
    q_star = solve_ground_truth(env).q_star
    q = q_star.copy()
    q[2, ChainEnv.RIGHT] = 2.0  # e = 1, target is the terminal reward so eps = 0
    states, actions, *_ = transition_table(env)
    idx = int(np.flatnonzero((states == 2) & (actions == ChainEnv.RIGHT))[0])
    chk = check_decomposition(env, q, _single(env, q, idx), 1.0, 10, np.random.default_rng(0), q_star)
    d = chk.closed_form
    assert (d.tde_variance_term, d.true_error_term, d.bias_interaction_term) == (1.0, 2.0, 0.0)
    assert chk.monte_carlo_delta == -1.0 and chk.residual == 0.0


def test_decomposition_random_chain_many_samples():
    env = ChainEnv(5, gamma=0.9)
    rng = np.random.default_rng(4)
    q_star = solve_ground_truth(env).q_star
    q = rng.uniform(-1, 2, q_star.shape)
    q[list(env.terminal_states)] = 0.0
    mu = rng.dirichlet(np.ones(8))
    chk = check_decomposition(env, q, mu, 0.3, 10_000, rng, q_star)
    assert chk.residual <= 1e-9
    assert chk.population.expected_change == pytest.approx(chk.closed_form.expected_change, abs=0.1)


def test_decomposition_rejects_bad_mu():
    env = ChainEnv(4)
    with pytest.raises(ValueError):
        check_decomposition(env, np.zeros((4, 2)), np.ones(6), 0.5, 10, np.random.default_rng(0))


def test_decomposition_suite_small():
    assert decomposition_suite(instances=30, samples=200).passed()


def test_suffix_sums():
    np.testing.assert_array_equal(suffix_sums([1, -2, 3]), [5, 3, 0])


def test_bound_tight_case_is_zero():
    rng = np.random.default_rng(0)
    deltas = np.array([0.5, 1.0, 0.0, 2.0])
    for zeta in (0.0, 0.7):
        model = BiasModel.sample(deltas, 1.3, zeta, rng, tight=True)
        assert abs(check_reliability_bound(model, deltas)) <= 1e-12


def test_bound_strict_inside():
    rng = np.random.default_rng(1)
    deltas = rng.exponential(size=20) + 0.1
    bound = 0.8 * suffix_sums(deltas)
    model = BiasModel(0.8, 0.0, rng.uniform(0.0, 1.0, 20) * bound * 0.99)
    model.epsilon[-1] = -0.01  # last position has zero downstream mass; any nonzero bias violates
    assert check_reliability_bound(model, deltas) > 0
    model.epsilon[-1] = 0.0
    assert check_reliability_bound(model, deltas) <= 0


@given(st.lists(st.floats(0, 5), min_size=1, max_size=30), st.floats(0, 3), st.floats(0, 1),
       st.integers(0, 2**32 - 1))
@settings(max_examples=200)
def test_bound_holds_under_assumption(deltas, lam, zeta, seed):
    model = BiasModel.sample(np.array(deltas), lam, zeta, np.random.default_rng(seed))
    assert check_reliability_bound(model, deltas) <= 1e-12 * max(1.0, lam * sum(deltas) + zeta)


def test_bias_model_validation():
    with pytest.raises(ValueError):
        BiasModel(-1.0, 0.0, np.zeros(2))


def test_implied_bias_ratio_on_optimal_table():
    env = ChainEnv(5)
    q_star = solve_ground_truth(env).q_star
    episode = [(s, 1, 1.0 if s == 3 else 0.0, s + 1, s == 3) for s in range(4)]
    ratio = implied_bias_ratio(env, q_star, episode, q_star)
    assert np.all(np.isnan(ratio))


def test_sign_test_examples():
    p, w, l = sign_test([2, 2, 2, 2, 2], [1, 1, 1, 1, 1])
    assert (w, l) == (5, 0) and p == pytest.approx(1 / 32)
    assert sign_test([1, 1], [1, 1]) == (1.0, 0, 0)


def test_hierarchy_zero_learning_rate_identical():
    r = check_hierarchy("chain:10", 3, hierarchy_config("chain:10", learning_rate=0.0))
    assert len({tuple(v) for v in r.errors.values()}) == 1


def test_hierarchy_long_budget_converges():
    cfg = hierarchy_config("chain:6", budget=4000, warmup=200, batch_size=4, learning_rate=0.25,
                           eps_start=1.0, eps_end=0.05, gradient_steps=1)
    r = check_hierarchy("chain:6", 3, cfg)
    assert max(max(v) for v in r.errors.values()) < 1e-6


@pytest.mark.parametrize("d,s,mu", [([1, 2], [1, 1], [1 / 3, 2 / 3]), ([1, 1], [1, 4], [0.8, 0.2]),
                                    ([0.7, 0.7], [2, 2], [0.5, 0.5])])
def test_closed_form_examples(d, s, mu):
    np.testing.assert_allclose(VarianceInstance(d, s).closed_form(), mu, atol=1e-15)


def test_infeasible_level():
    with pytest.raises(Infeasible):
        solve_optimal_mu(VarianceInstance([1.0, 2.0], [1.0, 1.0], tau=2.5))


def test_variance_instance_validation():
    with pytest.raises(ValueError):
        VarianceInstance([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        VarianceInstance([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        solve_optimal_mu(VarianceInstance(np.ones(5), np.ones(5)))


@pytest.mark.parametrize("seed", range(8))
def test_grid_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 2 + seed % 3
    d, s = rng.uniform(0.1, 2, n), rng.uniform(0.1, 2, n)
    tau = float(VarianceInstance(d, s).level)
    obj, _ = grid_minimize_brute(d, s, tau, 40)
    mu = grid_minimize(d, s, tau, 40)
    assert mu @ d >= tau - 1e-9
    assert mu @ s == pytest.approx(obj, abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_grid_close_to_linear_program(seed):
    rng = np.random.default_rng(100 + seed)
    n = 2 + seed % 3
    d, s = rng.uniform(0.1, 2, n), rng.uniform(0.1, 2, n)
    tau = float(VarianceInstance(d, s).level)
    lp = linprog(s, A_ub=[-d], b_ub=[-tau], A_eq=[np.ones(n)], b_eq=[1.0], bounds=[(0, 1)] * n)
    mu = grid_minimize(d, s, tau, 1000)
    assert lp.status == 0
    assert -1e-9 <= mu @ s - lp.fun <= n * np.ptp(s) / 1000 + 1e-12
