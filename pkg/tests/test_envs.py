import math
from collections import deque

import numpy as np
import pytest

from reaper.envs import (
    CartPoleEnv,
    ChainEnv,
    EnvSpec,
    GridWorldEnv,
    UnsupportedEnvironment,
    make_env,
    solve_ground_truth,
)


def test_resets():
    rng = np.random.default_rng(0)
    assert ChainEnv(10).reset(rng) == 0
    grid = GridWorldEnv(5, 5)
    assert grid.cell(grid.reset(rng)) == (0, 0)


def test_cartpole_reset_distribution():
    env, rng = CartPoleEnv(), np.random.default_rng(1)
    draws = np.array([env.reset(rng) for _ in range(20_000)])
    assert draws.shape == (20_000, 4)
    assert np.all(np.abs(draws) <= 0.05)
    # uniform on [-0.05, 0.05]: mean 0, variance 0.1^2 / 12
    se = math.sqrt(0.01 / 12 / 20_000)
    assert np.all(np.abs(draws.mean(axis=0)) < 4 * se)
    np.testing.assert_allclose(draws.var(axis=0), 0.01 / 12, rtol=0.05)


def test_chain_steps():
    env, rng = ChainEnv(10), np.random.default_rng(0)
    env.reset(rng)
    env.state = 8
    out = env.step(ChainEnv.RIGHT, rng)
    assert (out.next_state, out.reward, out.terminated) == (9, 1.0, True)
    env.reset(rng)
    env.state = 3
    out = env.step(ChainEnv.LEFT, rng)
    assert (out.next_state, out.reward, out.terminated) == (2, 0.0, False)


@pytest.mark.parametrize("action", [-1, 2, 1.0, "1"])
def test_invalid_action_rejected(action):
    env = ChainEnv(5)
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step(action)


def test_step_before_reset_raises():
    with pytest.raises(RuntimeError):
        ChainEnv(5).step(0)


def _hand_cartpole(state, action):
    # standard cart-pole equations written out independently
    x, xd, th, thd = state
    g, mc, mp, l, f, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    force = f if action == 1 else -f
    tmp = (force + mp * l * thd * thd * math.sin(th)) / (mc + mp)
    thacc = (g * math.sin(th) - math.cos(th) * tmp) / (l * (4 / 3 - mp * math.cos(th) ** 2 / (mc + mp)))
    xacc = tmp - mp * l * thacc * math.cos(th) / (mc + mp)
    return [x + tau * xd, xd + tau * xacc, th + tau * thd, thd + tau * thacc]


def test_cartpole_matches_hand_simulation():
    env, rng = CartPoleEnv(), np.random.default_rng(3)
    state = list(env.reset(rng))
    for action in (1, 0, 1):
        expect = _hand_cartpole(state, action)
        out = env.step(action, rng)
        np.testing.assert_allclose(out.next_state, expect, rtol=0, atol=1e-15)
        assert out.reward == 1.0 and not out.terminated
        state = expect


def test_cartpole_terminates_past_twelve_degrees():
    env, rng = CartPoleEnv(), np.random.default_rng(0)
    env.reset(rng)
    env.state = np.array([0.0, 0.0, 0.205, 0.5])
    out = env.step(1, rng)
    assert out.next_state[2] > 12 * math.pi / 180
    assert out.terminated and out.reward == 1.0 and not out.truncated


def test_cartpole_truncates_at_time_limit():
    env, rng = CartPoleEnv(max_episode_length=3), np.random.default_rng(0)
    env.reset(rng)
    outs = [env.step(a, rng) for a in (1, 0, 1)]
    assert [o.terminated for o in outs] == [False, False, True]
    assert outs[-1].truncated


@pytest.mark.parametrize("env_id", ["chain:6", "grid:3x4", "cartpole"])
def test_determinism_and_episode_bounds(env_id):
    def rollout(seed):
        env = make_env(env_id)
        rng = np.random.default_rng(seed)
        actions = np.random.default_rng(99).integers(0, env.spec.action_count, 400)
        states, ends = [], 0
        env.reset(rng)
        length = 0
        for a in actions:
            out = env.step(int(a), rng)
            length += 1
            assert length <= env.spec.max_episode_length
            states.append(np.asarray(out.next_state, dtype=float).tolist())
            if out.terminated:
                ends += 1
                length = 0
                env.reset(rng)
        return states, ends

    assert rollout(5) == rollout(5)


def test_env_spec_contract():
    with pytest.raises(ValueError):
        EnvSpec(action_count=1, gamma=0.9, max_episode_length=5, state_count=3)
    with pytest.raises(ValueError):
        EnvSpec(action_count=2, gamma=0.0, max_episode_length=5, state_count=3)
    with pytest.raises(ValueError):
        EnvSpec(action_count=2, gamma=0.9, max_episode_length=0, state_count=3)
    with pytest.raises(ValueError):
        EnvSpec(action_count=2, gamma=0.9, max_episode_length=5)


def test_make_env_ids():
    assert make_env("chain:7").spec.state_count == 7
    assert make_env("grid:4x3").spec.state_count == 12
    assert make_env("cartpole").spec.feature_dim == 4
    with pytest.raises(ValueError):
        make_env("pong")


def test_chain_ground_truth_undiscounted():
    gt = solve_ground_truth(ChainEnv(4, gamma=1.0))
    np.testing.assert_allclose(gt.q_star[:3, ChainEnv.RIGHT], 1.0)


def test_chain_ground_truth_discounted():
    # four states 0..3 with state 3 terminal: reward 1 arrives on the third step
    gt = solve_ground_truth(ChainEnv(4, gamma=0.9))
    assert gt.q_star[0, ChainEnv.RIGHT] == pytest.approx(0.9 ** 2, abs=1e-10)
    assert gt.q_star[2, ChainEnv.RIGHT] == pytest.approx(1.0, abs=1e-12)


def _shortest_path(grid: GridWorldEnv) -> int:
    seen, queue = {0: 0}, deque([0])
    while queue:
        s = queue.popleft()
        for a in range(4):
            ns, _, _ = grid.model(s, a)
            if ns not in seen:
                seen[ns] = seen[s] + 1
                queue.append(ns)
    return seen[grid.goal]


def test_grid_ground_truth_against_path_length():
    grid = GridWorldEnv(3, 3, gamma=0.9)
    gt = solve_ground_truth(grid)
    assert gt.v_star[0] == pytest.approx(0.9 ** (_shortest_path(grid) - 1), abs=1e-10)


@pytest.mark.parametrize("env", [ChainEnv(10), GridWorldEnv(5, 5), ChainEnv(6, gamma=0.8)])
def test_ground_truth_bellman_residual(env):
    gt = solve_ground_truth(env)
    assert gt.residual <= 1e-10
    np.testing.assert_array_equal(gt.v_star, gt.q_star.max(axis=1))
    for s in env.decision_states():
        for a in range(env.spec.action_count):
            ns, r, term = env.model(int(s), a)
            backup = r + (0.0 if term else env.spec.gamma * gt.v_star[ns])
            assert abs(gt.q_star[s, a] - backup) <= 1e-10


def test_cartpole_has_no_ground_truth():
    with pytest.raises(UnsupportedEnvironment):
        solve_ground_truth(CartPoleEnv())
