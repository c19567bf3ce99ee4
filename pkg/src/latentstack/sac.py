"""Off-policy maximum-entropy actor-critic for flow policies.

Soft actor-critic style learner with a Q network, a state-value network and
its Polyak-averaged target. The policy objective is

    E[ log pi(a|s) - log p(a) - Q(s, a) ],  a = f(h; s), h ~ N(0, I)

where ``p`` is the action prior: uniform (constant dropped, pure entropy
bonus) or unit Gaussian (KL to the prior, used for upper hierarchy layers).
The temperature is folded into ``reward_scale``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Adam, Tensor, forward_numpy, make_rng
from .flow import LOG_2PI

log = logging.getLogger(__name__)

LATENT_MODES = ("per_step", "per_rollout", "hold_n")


class TrainingDivergence(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainerConfig:
    reward_scale: float = 1.0
    discount: float = 0.99
    target_smoothing: float = 1e-2
    batch_size: int = 128
    steps_per_epoch: int = 1000
    min_pool_size: int = 1000
    max_path_length: int = 1000
    total_epochs: int = 10
    seed: int = 0
    action_prior: str = "uniform"
    learning_rate: float = 3e-4
    pool_capacity: int = 1_000_000
    hidden_units: int = 128
    n_coupling: int = 2
    eval_rollouts: int = 10
    latent_mode: str = "per_step"
    hold_n: int = 1

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if not 0.0 < self.target_smoothing <= 1.0:
            raise ValueError(f"target_smoothing must lie in (0, 1], got {self.target_smoothing}")
        if self.action_prior not in ("uniform", "gaussian"):
            raise ValueError(f"action_prior must be 'uniform' or 'gaussian', got {self.action_prior!r}")
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"latent_mode must be one of {LATENT_MODES}, got {self.latent_mode!r}")
        if self.hold_n < 1:
            raise ValueError("hold_n must be at least 1")
        for name in ("batch_size", "steps_per_epoch", "max_path_length", "pool_capacity",
                     "eval_rollouts", "hidden_units", "n_coupling"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_epochs < 0 or self.min_pool_size < 0:
            raise ValueError("total_epochs and min_pool_size must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayPool:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, obs_dim, action_dim, capacity=1_000_000):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.terminals = np.zeros(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, tr):
        if not math.isfinite(tr.reward):
            raise ValueError(f"non-finite reward {tr.reward}")
        i = self._next
        self.obs[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.next_obs[i] = tr.next_state
        self.terminals[i] = float(tr.terminal)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng, n):
        return rng.integers(0, self.size, size=n)

    def batch(self, idx):
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.terminals[idx])


class ValueNets:
    def __init__(self, obs_dim, action_dim, rng, hidden=128):
        self.q = MLP([obs_dim + action_dim, hidden, hidden, 1], rng, name="q")
        self.v = MLP([obs_dim, hidden, hidden, 1], rng, name="v")
        self.v_target = MLP([obs_dim, hidden, hidden, 1], rng, name="v_target")
        ad.copy_params(self.v.params(), self.v_target.params())

    def params(self):
        return self.q.params() + self.v.params() + self.v_target.params()


def target_update(nets, tau):
    ad.polyak(nets.v.params(), nets.v_target.params(), tau)
    return nets


def prior_log_density_t(kind, a):
    """Action-prior log density of a batch tensor (uniform: constant dropped)."""
    if kind == "uniform":
        return None
    d = a.shape[-1]
    return ad.scale(ad.sum(ad.square(a), axis=-1), -0.5) - 0.5 * d * LOG_2PI


class LatentSchedule:
    """Stream of prior samples for one rollout.

    ``per_step`` draws a fresh latent each step, ``per_rollout`` reuses the
    first draw, ``hold_n`` redraws every ``n`` steps.
    """

    def __init__(self, mode, n, prior, rng):
        if mode not in LATENT_MODES:
            raise ValueError(f"unknown latent mode {mode!r}")
        if mode == "hold_n" and n < 1:
            raise ValueError("hold_n requires n >= 1")
        self.mode, self.n, self.prior, self.rng = mode, int(n), prior, rng
        self.t = 0
        self._h = None

    def next(self):
        fresh = (self._h is None or self.mode == "per_step"
                 or (self.mode == "hold_n" and self.t % self.n == 0))
        if fresh:
            self._h = self.prior.sample(self.rng)
        self.t += 1
        return self._h


def latent_schedule(mode, n, rng, prior, steps):
    """Materialise ``steps`` latents from a schedule as an array."""
    sched = LatentSchedule(mode, n, prior, rng)
    return np.stack([sched.next() for _ in range(steps)])


def rollout(env, policy, rng, reward_channel, max_steps, latent_mode="per_step", hold_n=1,
            record=False):
    """Run one episode sampling from ``policy``.

    Returns ``(total_raw_reward, reached_terminal, trajectory)``; the
    trajectory is a list of ``(state, action, reward)`` when ``record``.
    """
    env_rng, lat_rng = ad.split_rng(rng, 2)
    obs = env.reset(env_rng)
    sched = LatentSchedule(latent_mode, hold_n, policy.prior, lat_rng)
    total, terminal, traj = 0.0, False, []
    for _ in range(max_steps):
        a, _ = policy.forward(sched.next(), obs)
        nxt, rewards, terminal = env.step(a)
        r = rewards[reward_channel]
        if record:
            traj.append((obs, a, r))
        total += r
        obs = nxt
        if terminal:
            break
    return total, terminal, traj


def eval_seed(seed, i):
    return make_rng([int(seed), 104729, int(i)])


class Trainer:
    """Holds one layer's learner state: value nets, optimisers, pool, RNG streams."""

    def __init__(self, env, policy, config, reward_channel=None, nets=None):
        self.env = env
        self.policy = policy
        self.config = config
        spec = env.spec
        if policy.obs_dim != spec.observation_dim or policy.action_dim != spec.action_dim:
            raise ValueError(
                f"policy dims (obs {policy.obs_dim}, act {policy.action_dim}) do not match "
                f"environment (obs {spec.observation_dim}, act {spec.action_dim})")
        self.reward_channel = reward_channel or spec.task_channel
        if self.reward_channel not in spec.reward_channels:
            raise ValueError(f"environment has no reward channel {self.reward_channel!r}; "
                             f"available: {spec.reward_channels}")
        root = make_rng(config.seed)
        (init_rng, self.env_rng, self.act_rng, self.batch_rng,
         self.update_rng) = ad.split_rng(root, 5)
        self.nets = nets or ValueNets(spec.observation_dim, spec.action_dim, init_rng,
                                      config.hidden_units)
        lr = config.learning_rate
        self.q_opt = Adam(self.nets.q.params(), lr=lr)
        self.v_opt = Adam(self.nets.v.params(), lr=lr)
        self.pi_opt = Adam(policy.params(), lr=lr)
        self.pool = ReplayPool(spec.observation_dim, spec.action_dim, config.pool_capacity)
        self.max_path_length = min(config.max_path_length, spec.max_episode_steps)
        lo, hi = spec.action_bounds
        self._bounds = None if (np.isinf(lo) and np.isinf(hi)) else (float(lo), float(hi))
        self.total_env_steps = 0
        self.updates = 0
        self._obs = None
        self._path_t = 0
        self._sched = None

    # -- experience ---------------------------------------------------------
    def collect_step(self):
        if self._obs is None:
            self._obs = self.env.reset(self.env_rng)
            self._path_t = 0
            self._sched = LatentSchedule(self.config.latent_mode, self.config.hold_n,
                                         self.policy.prior, self.act_rng)
        h = self._sched.next()
        a, _ = self.policy.forward(h, self._obs)
        nxt, rewards, terminal = self.env.step(a)
        raw = float(rewards[self.reward_channel])
        tr = Transition(self._obs, a, self.config.reward_scale * raw, nxt, bool(terminal))
        self.pool.add(tr)
        self.total_env_steps += 1
        self._path_t += 1
        self._obs = nxt
        if terminal or self._path_t >= self.max_path_length:
            self._obs = None
        return tr

    # -- learning -----------------------------------------------------------
    def losses_t(self, obs, act, rew, nobs, done, h):
        """Q, V and policy losses for one batch as tape tensors (call under a Tape).

        ``act`` must already be clipped to the action bounds.
        """
        cfg, nets, policy = self.config, self.nets, self.policy
        v_next = forward_numpy(nets.v_target, nobs)[:, 0]
        q_target = rew + cfg.discount * (1.0 - done) * v_next
        obs_t = Tensor(obs)
        q_pred = ad.take(nets.q(ad.concat([obs_t, Tensor(act)])), 0)
        q_loss = ad.scale(ad.mean(ad.square(q_pred - q_target)), 0.5)

        a_new, log_det = policy.forward_t(Tensor(h), obs_t)
        log_pi = policy.prior.log_density(h) - log_det
        log_p = prior_log_density_t(cfg.action_prior, a_new)
        kl_term = log_pi if log_p is None else log_pi - log_p
        # the critic sees the action the environment executes
        a_exec = a_new if self._bounds is None else ad.clip(a_new, *self._bounds)
        q_new = ad.take(nets.q(ad.concat([obs_t, a_exec])), 0)
        v_pred = ad.take(nets.v(obs_t), 0)
        v_target = q_new.data - kl_term.data
        v_loss = ad.scale(ad.mean(ad.square(v_pred - v_target)), 0.5)
        policy_loss = ad.mean(kl_term - q_new)
        return q_loss, v_loss, policy_loss, log_pi

    def update_step(self):
        cfg = self.config
        if len(self.pool) < max(cfg.min_pool_size, 1):
            raise RuntimeError(f"pool holds {len(self.pool)} samples; need {cfg.min_pool_size}")
        idx = self.pool.sample_indices(self.batch_rng, cfg.batch_size)
        obs, act, rew, nobs, done = self.pool.batch(idx)
        if self._bounds is not None:
            act = np.clip(act, *self._bounds)
        h = self.policy.prior.sample(self.update_rng, cfg.batch_size)

        with ad.Tape():
            q_loss, v_loss, policy_loss, log_pi = self.losses_t(obs, act, rew, nobs, done, h)
            losses = {"q_loss": q_loss.item(), "v_loss": v_loss.item(),
                      "policy_loss": policy_loss.item(),
                      "mean_entropy_estimate": float(-np.mean(log_pi.data))}
            if not all(math.isfinite(x) for x in losses.values()):
                raise TrainingDivergence(
                    f"non-finite loss at update {self.updates}",
                    {"update": self.updates, "env_steps": self.total_env_steps, **losses,
                     "batch_reward_mean": float(np.mean(rew)),
                     "batch_obs_absmax": float(np.max(np.abs(obs))),
                     "batch_action_absmax": float(np.max(np.abs(act)))})
            q_grads = ad.grad(q_loss, self.q_opt.params)
            v_grads = ad.grad(v_loss, self.v_opt.params)
            pi_grads = ad.grad(policy_loss, self.pi_opt.params)
        self.q_opt.step(q_grads)
        self.v_opt.step(v_grads)
        self.pi_opt.step(pi_grads)
        target_update(self.nets, cfg.target_smoothing)
        self.updates += 1
        return losses

    def evaluate(self, n_rollouts=None, record=False):
        n = self.config.eval_rollouts if n_rollouts is None else n_rollouts
        return evaluate_policy(self.env, self.policy, n, self.config.seed, self.reward_channel,
                               self.max_path_length, self.config.latent_mode,
                               self.config.hold_n, record=record)


def evaluate_policy(env, policy, n_rollouts, seed, reward_channel, max_steps,
                    latent_mode="per_step", hold_n=1, record=False):
    """Stochastic rollouts with fixed per-rollout seeds."""
    returns, successes, trajs = [], [], []
    for i in range(n_rollouts):
        total, terminal, traj = rollout(env, policy, eval_seed(seed, i), reward_channel,
                                        max_steps, latent_mode, hold_n, record)
        returns.append(total)
        successes.append(bool(terminal))
        trajs.append(traj)
    return {"returns": returns, "mean_return": float(np.mean(returns)),
            "std_return": float(np.std(returns)), "success_rate": float(np.mean(successes)),
            "successes": successes, "trajectories": trajs if record else None}


@dataclass
class MetricRow:
    epoch: int
    total_env_steps: int
    mean_return: float
    std_return: float
    q_loss: float
    v_loss: float
    policy_loss: float
    entropy_estimate: float
    wall_clock_seconds: float
    success_rate: float = field(default=0.0, repr=False)


METRIC_FIELDS = ("epoch", "total_env_steps", "mean_return", "std_return", "q_loss", "v_loss",
                 "policy_loss", "entropy_estimate", "wall_clock_seconds")


def train(env, policy, config, reward_channel=None, callback=None, trainer=None):
    """Alternate environment steps and gradient updates for ``total_epochs``.

    Returns ``(policy, rows, trainer)``. ``callback(row, trainer)`` runs after
    each epoch.
    """
    tr = trainer or Trainer(env, policy, config, reward_channel)
    rows = []
    start = time.perf_counter()
    for epoch in range(config.total_epochs):
        sums = {"q_loss": 0.0, "v_loss": 0.0, "policy_loss": 0.0, "mean_entropy_estimate": 0.0}
        n_upd = 0
        for _ in range(config.steps_per_epoch):
            tr.collect_step()
            if len(tr.pool) >= max(config.min_pool_size, 1):
                losses = tr.update_step()
                for k in sums:
                    sums[k] += losses[k]
                n_upd += 1
        ev = tr.evaluate()
        means = {k: (v / n_upd if n_upd else float("nan")) for k, v in sums.items()}
        row = MetricRow(epoch=epoch, total_env_steps=tr.total_env_steps,
                        mean_return=ev["mean_return"], std_return=ev["std_return"],
                        q_loss=means["q_loss"], v_loss=means["v_loss"],
                        policy_loss=means["policy_loss"],
                        entropy_estimate=means["mean_entropy_estimate"],
                        wall_clock_seconds=time.perf_counter() - start,
                        success_rate=ev["success_rate"])
        rows.append(row)
        log.info("epoch %d steps %d return %.3f +- %.3f success %.2f entropy %.3f",
                 epoch, row.total_env_steps, row.mean_return, row.std_return,
                 row.success_rate, row.entropy_estimate)
        if callback is not None:
            callback(row, tr)
    return policy, rows, tr
