import numpy as np
import pytest

from latentstack.autodiff import make_rng
from latentstack.envs import (GOAL_REWARD, GOALS, PointMass2D, PointMaze, QuadraticBandit,
                              ScaledRewards, TabularMDP, make_env, pretraining_variant,
                              random_tabular_mdp, risky_branch_mdp)


def test_maze_spec_and_observation_layout():
    env = PointMaze(2)
    obs = env.reset(make_rng(0))
    assert env.spec.observation_dim == obs.shape[0] == 6
    assert set(env.spec.reward_channels) == {"velocity_norm", "sparse_goal", "task"}
    np.testing.assert_allclose(obs[4:], np.asarray(GOALS[2]) - obs[:2])
    assert 1.75 <= obs[0] <= 2.25 and 0.25 <= obs[1] <= 0.75


def test_wall_blocks_motion_and_zeroes_velocity():
    env = PointMaze(0)
    env.set_state([2.0, 1.97], [0.0, 1.0])  # just below the top bar of the U
    obs, rewards, done = env.step(np.array([0.0, 2.0]))
    np.testing.assert_array_equal(obs[:2], [2.0, 1.97])
    np.testing.assert_array_equal(obs[2:4], [0.0, 0.0])
    assert rewards["velocity_norm"] == 0.0 and not done


def test_wall_keeps_tangential_velocity():
    env = PointMaze(0)
    env.set_state([2.0, 1.97], [1.0, 1.0])
    obs, _, _ = env.step(np.zeros(2))
    np.testing.assert_array_equal(obs[:2], [2.0, 1.97])
    assert obs[3] == 0.0 and obs[2] == pytest.approx(0.95)
    obs, _, _ = env.step(np.zeros(2))
    assert obs[0] > 2.0 and obs[1] == 1.97


def test_boundary_keeps_agent_inside():
    env = PointMaze(0)
    env.reset(make_rng(1))
    for _ in range(300):
        obs, _, _ = env.step(np.array([0.0, -2.0]))
    assert obs[1] > 0.0


def test_goal_reward_and_termination():
    env = PointMaze(1)
    env.set_state(np.asarray(GOALS[1]) - [0.0, 0.3], [0.0, 1.5])
    total, done = 0.0, False
    for _ in range(20):
        _, r, done = env.step(np.array([0.0, 2.0]))
        total += r["sparse_goal"]
        if done:
            break
    assert done and total == GOAL_REWARD and r["task"] == GOAL_REWARD


def test_actions_clipped_and_speed_bounded():
    env = PointMass2D()
    env.reset(make_rng(0))
    for _ in range(500):
        obs, r, _ = env.step(np.array([1e6, 1e6]))
    assert np.hypot(*obs[2:4]) <= 2.0 + 1e-12
    assert r["velocity_norm"] == pytest.approx(np.hypot(*obs[2:4]))


def test_pretraining_variant_has_no_walls_and_no_goal():
    maze = PointMaze(0)
    pre = pretraining_variant(maze)
    obs = pre.reset(make_rng(0))
    assert pre.walls == [] and pre.spec.observation_dim == maze.spec.observation_dim
    np.testing.assert_array_equal(obs[4:], [0.0, 0.0])
    pre.set_state([2.0, 1.97], [0.0, 1.0])
    obs, _, _ = pre.step(np.array([0.0, 2.0]))
    assert obs[1] > 1.97


def test_bandit_reward():
    env = QuadraticBandit(k=0.5, target=(1.0, -1.0))
    env.reset(None)
    _, r, done = env.step(np.array([1.0, -1.0]))
    assert r["task"] == 0.0 and done
    _, r, _ = env.step(np.array([0.0, 0.0]))
    assert r["task"] == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        env.step(np.zeros(3))


def test_scaled_rewards():
    env = ScaledRewards(QuadraticBandit(), 4.0)
    env.reset(None)
    _, r, _ = env.step(np.zeros(2))
    assert r["task"] == -4.0


def test_tabular_validation():
    p = np.ones((2, 2, 2))
    with pytest.raises(ValueError, match="negative"):
        TabularMDP(p, np.zeros((2, 2)), 2)
    with pytest.raises(ValueError, match="shapes"):
        TabularMDP(p, -np.ones((3, 2)), 2)
    mdp = TabularMDP(p, -np.ones((2, 2)), 2)
    np.testing.assert_allclose(mdp.transitions.sum(axis=2), 1.0)


def test_tabular_step_and_horizon():
    rng = make_rng(0)
    mdp = random_tabular_mdp(rng, 4, 3, horizon=2, deterministic=True)
    assert mdp.is_deterministic()
    mdp.reset(rng)
    dones = [mdp.step(0, rng)[2] for _ in range(3)]
    assert dones == [False, False, True]


def test_risky_branch_structure():
    mdp = risky_branch_mdp()
    assert not mdp.is_deterministic()
    np.testing.assert_allclose(mdp.transitions[0, 1], [0.0, 0.1, 0.9])


def test_make_env_registry():
    assert isinstance(make_env("point_maze", goal_index=2), PointMaze)
    assert isinstance(make_env("point_maze_pretrain"), PointMass2D)
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("cartpole")
    with pytest.raises(ValueError, match="goal_index"):
        make_env("point_maze", goal_index=7)
