"""Small environments with named reward channels.

Every environment exposes ``spec``, ``reset(rng) -> obs`` and
``step(action) -> (obs, rewards, terminal)`` where ``rewards`` maps each
declared channel name to a float. Actions are clipped to ``spec.action_bounds``
before they touch the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_dim: int
    max_episode_steps: int
    reward_channels: tuple
    action_bounds: tuple = (-np.inf, np.inf)
    task_channel: str = "task"

    def __post_init__(self):
        if self.observation_dim < 1 or self.action_dim < 1 or self.max_episode_steps < 1:
            raise ValueError("environment dimensions must be positive")


def _check_action(action, dim):
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape[0] != dim:
        raise ValueError(f"action must have dimension {dim}, got {a.shape[0]}")
    return a


# ---------------------------------------------------------------------------
# point mass family

DT = 0.05
FRICTION = 0.05
V_MAX = 2.0
ACTION_LIMIT = 2.0
GOAL_REWARD = 1000.0
GOAL_RADIUS = 0.25


def _segments_intersect(p, q, a, b):
    """True when segment p-q touches segment a-b (closed segments)."""
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    def on_seg(u, v, w):
        return (min(u[0], v[0]) - 1e-12 <= w[0] <= max(u[0], v[0]) + 1e-12
                and min(u[1], v[1]) - 1e-12 <= w[1] <= max(u[1], v[1]) + 1e-12)

    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    return ((d1 == 0 and on_seg(a, b, p)) or (d2 == 0 and on_seg(a, b, q))
            or (d3 == 0 and on_seg(p, q, a)) or (d4 == 0 and on_seg(p, q, b)))


class PointMass2D:
    """Damped point mass on the plane, optionally with wall segments.

    Observation is ``[x, y, vx, vy, gx - x, gy - y]``; without a goal the
    last block is held at zero so the layout matches :class:`PointMaze`.
    A move whose path crosses a wall is cancelled and the velocity component
    normal to each crossed wall is removed, so the mass can slide along it
    on the next step.
    """

    def __init__(self, walls=(), start_low=(1.75, 0.25), start_high=(2.25, 0.75),
                 max_episode_steps=300, action_limit=ACTION_LIMIT):
        self.walls = [tuple(map(tuple, np.asarray(w, dtype=np.float64))) for w in walls]
        self.start_low = np.asarray(start_low, dtype=np.float64)
        self.start_high = np.asarray(start_high, dtype=np.float64)
        self.action_limit = float(action_limit)
        self.spec = EnvSpec(observation_dim=6, action_dim=2, max_episode_steps=max_episode_steps,
                            reward_channels=("velocity_norm",),
                            action_bounds=(-self.action_limit, self.action_limit),
                            task_channel="velocity_norm")
        self.goal = None
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _obs(self):
        rel = np.zeros(2) if self.goal is None else self.goal - self.pos
        return np.concatenate([self.pos, self.vel, rel])

    def reset(self, rng):
        self.pos = rng.uniform(self.start_low, self.start_high)
        self.vel = np.zeros(2)
        return self._obs()

    def set_state(self, pos, vel):
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.vel = np.asarray(vel, dtype=np.float64).copy()
        return self._obs()

    def blocked(self, p, q):
        return any(_segments_intersect(p, q, a, b) for a, b in self.walls)

    def _move(self, action):
        a = np.clip(_check_action(action, 2), -self.action_limit, self.action_limit)
        vel = (1.0 - FRICTION) * self.vel + DT * a
        speed = float(np.hypot(vel[0], vel[1]))
        if speed > V_MAX:
            vel *= V_MAX / speed
        new_pos = self.pos + DT * vel
        hit = [w for w in self.walls if _segments_intersect(self.pos, new_pos, *w)]
        if hit:
            for a, b in hit:
                n = np.array([a[1] - b[1], b[0] - a[0]])
                n /= np.hypot(n[0], n[1])
                vel = vel - np.dot(vel, n) * n
            new_pos = self.pos
        self.pos, self.vel = new_pos, vel

    def step(self, action):
        self._move(action)
        return self._obs(), {"velocity_norm": float(np.hypot(*self.vel))}, False


ARENA = 4.0
# U-shaped block opening downwards, centred in the arena
U_WALLS = (
    ((1.0, 2.0), (3.0, 2.0)),
    ((1.0, 1.0), (1.0, 2.0)),
    ((3.0, 1.0), (3.0, 2.0)),
)
BOUNDARY = (
    ((0.0, 0.0), (ARENA, 0.0)),
    ((ARENA, 0.0), (ARENA, ARENA)),
    ((ARENA, ARENA), (0.0, ARENA)),
    ((0.0, ARENA), (0.0, 0.0)),
)
GOALS = {0: (0.5, 3.0), 1: (2.0, 3.5), 2: (3.5, 3.0)}
GOAL_NAMES = {0: "left", 1: "top", 2: "right"}


class PointMaze(PointMass2D):
    """4x4 walled arena with a U-shaped obstacle and one of three goals."""

    def __init__(self, goal_index=0, max_episode_steps=300, action_limit=ACTION_LIMIT):
        if goal_index not in GOALS:
            raise ValueError(f"goal_index must be one of {sorted(GOALS)}, got {goal_index}")
        super().__init__(walls=BOUNDARY + U_WALLS, max_episode_steps=max_episode_steps,
                         action_limit=action_limit)
        self.goal_index = goal_index
        self.goal = np.asarray(GOALS[goal_index], dtype=np.float64)
        self.spec = EnvSpec(observation_dim=6, action_dim=2, max_episode_steps=max_episode_steps,
                            reward_channels=("velocity_norm", "sparse_goal", "task"),
                            action_bounds=(-self.action_limit, self.action_limit),
                            task_channel="sparse_goal")

    def at_goal(self):
        return float(np.hypot(*(self.pos - self.goal))) <= GOAL_RADIUS

    def step(self, action):
        self._move(action)
        done = self.at_goal()
        r = GOAL_REWARD if done else 0.0
        rewards = {"velocity_norm": float(np.hypot(*self.vel)), "sparse_goal": r, "task": r}
        return self._obs(), rewards, done


def pretraining_variant(env):
    """Wall-free copy of a maze with the same dynamics and observation layout."""
    if not isinstance(env, PointMaze):
        raise TypeError("pretraining_variant expects a PointMaze")
    return PointMass2D(walls=(), start_low=env.start_low, start_high=env.start_high,
                       max_episode_steps=env.spec.max_episode_steps,
                       action_limit=env.action_limit)


# ---------------------------------------------------------------------------
# one-step bandit

class QuadraticBandit:
    """Horizon-one task with reward ``-k * |a - target|^2``."""

    def __init__(self, k=0.5, target=(1.0, -1.0)):
        self.k = float(k)
        self.target = np.asarray(target, dtype=np.float64).reshape(-1)
        dim = self.target.shape[0]
        self.spec = EnvSpec(observation_dim=1, action_dim=dim, max_episode_steps=1,
                            reward_channels=("task",))

    def reset(self, rng):
        return np.ones(1)

    def step(self, action):
        a = _check_action(action, self.spec.action_dim)
        r = -self.k * float(np.sum((a - self.target) ** 2))
        return np.ones(1), {"task": r}, True


# ---------------------------------------------------------------------------
# finite MDPs for exact inference

@dataclass
class TabularMDP:
    """Finite-horizon MDP with strictly negative rewards and a uniform action prior.

    ``transitions[s, a, s']`` holds ``p(s' | s, a)``; ``rewards[s, a]`` < 0.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    horizon: int
    initial: np.ndarray = None
    action_prior: np.ndarray = None
    state: int = field(default=0, init=False)
    t: int = field(default=0, init=False)

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ValueError(f"inconsistent shapes: transitions {p.shape}, rewards {r.shape}")
        if np.any(p < 0) or np.any(p.sum(axis=2) <= 0):
            raise ValueError("transition rows must be non-negative with positive mass")
        if np.any(r >= 0):
            raise ValueError("rewards must be strictly negative")
        self.transitions = p / p.sum(axis=2, keepdims=True)
        self.rewards = r
        if self.initial is None:
            self.initial = np.eye(p.shape[0])[0]
        if self.action_prior is None:
            self.action_prior = np.full(p.shape[1], 1.0 / p.shape[1])

    @property
    def n_states(self):
        return self.transitions.shape[0]

    @property
    def n_actions(self):
        return self.transitions.shape[1]

    def is_deterministic(self):
        return bool(np.all(np.isclose(self.transitions.max(axis=2), 1.0)))

    def reset(self, rng):
        self.state = int(rng.choice(self.n_states, p=self.initial))
        self.t = 0
        return self.state

    def step(self, action, rng):
        s = self.state
        r = float(self.rewards[s, action])
        self.state = int(rng.choice(self.n_states, p=self.transitions[s, action]))
        self.t += 1
        return self.state, {"task": r}, self.t > self.horizon


def random_tabular_mdp(rng, n_states, n_actions, horizon, deterministic=True):
    if deterministic:
        nxt = rng.integers(0, n_states, size=(n_states, n_actions))
        p = np.zeros((n_states, n_actions, n_states))
        p[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = -rng.uniform(0.05, 2.0, size=(n_states, n_actions))
    return TabularMDP(p, r, horizon)


def risky_branch_mdp():
    """Three states: start, jackpot, trap.

    Action 0 is safe (moderate cost, stays at start). Action 1 gambles: it
    reaches the cheap jackpot state with probability 0.1 and the expensive
    trap otherwise. Exact posterior inference assumes it can steer the coin
    flip and therefore overrates the gamble.
    """
    p = np.zeros((3, 2, 3))
    p[0, 0, 0] = 1.0
    p[0, 1, 1], p[0, 1, 2] = 0.1, 0.9
    p[1, :, 1] = 1.0
    p[2, :, 2] = 1.0
    r = np.array([[-1.0, -1.0],
                  [-0.01, -0.01],
                  [-5.0, -5.0]])
    return TabularMDP(p, r, horizon=2)


class ScaledRewards:
    """Multiplies every reward channel of ``env`` by ``c``."""

    def __init__(self, env, c):
        self.inner = env
        self.c = float(c)
        self.spec = env.spec

    def reset(self, rng):
        return self.inner.reset(rng)

    def step(self, action):
        obs, rewards, terminal = self.inner.step(action)
        return obs, {k: self.c * v for k, v in rewards.items()}, terminal


def make_env(name, **params):
    """Build an environment from its registry name and keyword parameters."""
    builders = {
        "point_mass": PointMass2D,
        "point_maze": PointMaze,
        "point_maze_pretrain": lambda **kw: pretraining_variant(PointMaze(**kw)),
        "quadratic_bandit": QuadraticBandit,
    }
    if name not in builders:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(builders)}")
    return builders[name](**params)
