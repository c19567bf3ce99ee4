"""Reference computations that share no code with the learners.

Tabular control-as-inference (brute-force posterior and soft value
iteration), finite-difference derivatives, grid integration of policy
densities and the closed-form optimum of the quadratic bandit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

MAX_TRAJECTORIES = 10_000_000


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tabular control as inference

@dataclass
class TrajectoryPosterior:
    """``policy[t][s, a] = p(a_t = a | s_t = s, O_{t:T})``."""

    policy: np.ndarray  # [T+1, S, A]


@dataclass
class SoftValues:
    q: np.ndarray       # [T+1, S, A]
    v: np.ndarray       # [T+2, S]; last row is zero
    policy: np.ndarray  # [T+1, S, A]


def enumerate_posterior(mdp, horizon=None):
    """Exact action posterior by summing trajectory weights explicitly.

    For every time ``t`` and state ``s`` all continuations
    ``(a_t, s_{t+1}, ..., a_T, s_{T+1})`` are listed and weighted by
    ``prod p(a_k) p(s_{k+1}|s_k, a_k) exp(r(s_k, a_k))``; the posterior is
    the weight mass per first action, normalised.
    """
    T = mdp.horizon if horizon is None else int(horizon)
    nS, nA = mdp.n_states, mdp.n_actions
    count = nS * (nS * nA) ** (T + 1)
    if count > MAX_TRAJECTORIES:
        raise OracleError(f"enumeration of {count} trajectories exceeds guard {MAX_TRAJECTORIES}")
    P, R, prior = mdp.transitions, mdp.rewards, mdp.action_prior
    policy = np.zeros((T + 1, nS, nA))
    for t in range(T + 1):
        steps = T - t + 1
        acts = np.array(list(itertools.product(range(nA), repeat=steps)), dtype=np.int64)
        nxts = np.array(list(itertools.product(range(nS), repeat=steps)), dtype=np.int64)
        # all (action sequence, next-state sequence) pairs
        A = np.repeat(acts, len(nxts), axis=0)
        S = np.tile(nxts, (len(acts), 1))
        for s0 in range(nS):
            w = np.ones(len(A))
            cur = np.full(len(A), s0)
            for k in range(steps):
                a = A[:, k]
                w *= prior[a] * np.exp(R[cur, a]) * P[cur, a, S[:, k]]
                cur = S[:, k]
            mass = np.bincount(A[:, 0], weights=w, minlength=nA)
            policy[t, s0] = mass / mass.sum()
    return TrajectoryPosterior(policy)


def soft_value_iteration(mdp, horizon=None):
    """Backward soft Bellman recursion under the true dynamics."""
    T = mdp.horizon if horizon is None else int(horizon)
    nS, nA = mdp.n_states, mdp.n_actions
    log_prior = np.log(mdp.action_prior)
    q = np.zeros((T + 1, nS, nA))
    v = np.zeros((T + 2, nS))
    pi = np.zeros((T + 1, nS, nA))
    for t in range(T, -1, -1):
        q[t] = mdp.rewards + mdp.transitions @ v[t + 1]
        v[t] = logsumexp(q[t] + log_prior, axis=1)
        pi[t] = np.exp(q[t] + log_prior - v[t][:, None])
    return SoftValues(q, v, pi)


def policy_objective(mdp, policy, horizon=None):
    """Exact ``E[sum_t r - KL(pi(.|s_t) || p)]`` for a time-indexed tabular policy."""
    T = mdp.horizon if horizon is None else int(horizon)
    policy = np.asarray(policy, dtype=np.float64)
    if policy.ndim == 2:
        policy = np.broadcast_to(policy, (T + 1,) + policy.shape)
    u = np.zeros(mdp.n_states)
    log_prior = np.log(mdp.action_prior)
    for t in range(T, -1, -1):
        pi = policy[t]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = np.where(pi > 0, np.log(pi) - log_prior, 0.0)
        per_action = mdp.rewards - log_ratio + mdp.transitions @ u
        u = np.sum(pi * per_action, axis=1)
    return float(mdp.initial @ u)


def random_tabular_policy(rng, mdp, horizon=None):
    T = mdp.horizon if horizon is None else int(horizon)
    return rng.dirichlet(np.ones(mdp.n_actions), size=(T + 1, mdp.n_states))


# ---------------------------------------------------------------------------
# derivatives

def numeric_jacobian(fn, point, obs=None, step=1e-5):
    """Central-difference Jacobian of ``fn(point, obs)`` (or ``fn(point)``)."""
    x = np.asarray(point, dtype=np.float64).reshape(-1)
    call = (lambda z: fn(z)) if obs is None else (lambda z: fn(z, obs))
    y0 = np.asarray(call(x), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(y0)):
        raise OracleError("map is not finite at the evaluation point")
    jac = np.zeros((y0.size, x.size))
    for j in range(x.size):
        dx = np.zeros_like(x)
        dx[j] = step
        hi = np.asarray(call(x + dx), dtype=np.float64).reshape(-1)
        lo = np.asarray(call(x - dx), dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise OracleError(f"map is not finite near the point along coordinate {j}")
        jac[:, j] = (hi - lo) / (2.0 * step)
    return jac


def log_abs_det(jac):
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0:
        raise OracleError("Jacobian is singular")
    return float(logdet)


def finite_difference_grad(loss_fn, arrays, step=1e-5):
    """Central differences of scalar ``loss_fn()`` w.r.t. arrays mutated in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# densities

def grid_integrate_density(policy, obs, bounds=(-6.0, 6.0), resolution=400):
    """Midpoint Riemann sum of ``exp(policy.log_prob(a, obs))`` over a box."""
    dim = policy.action_dim
    if dim > 2:
        raise OracleError(f"grid integration supports at most 2 action dims, got {dim}")
    lo, hi = map(float, bounds)
    width = (hi - lo) / resolution
    centers = lo + width * (np.arange(resolution) + 0.5)
    if dim == 1:
        pts = centers[:, None]
    else:
        gx, gy = np.meshgrid(centers, centers, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    obs = np.asarray(obs, dtype=np.float64)
    total = 0.0
    for chunk in np.array_split(pts, max(1, len(pts) // 20000)):
        logp = np.asarray(policy.log_prob(chunk, np.broadcast_to(obs, (len(chunk), obs.size))))
        total += float(np.sum(np.exp(logp)))
    return total * width ** dim


@dataclass
class DiagonalGaussian:
    mean: np.ndarray
    variance: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_density(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = (x - self.mean) ** 2 / self.variance
        return -0.5 * np.sum(z + np.log(2.0 * math.pi * self.variance), axis=-1)

    def sample(self, rng, n):
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    def entropy(self):
        return float(0.5 * np.sum(np.log(2.0 * math.pi * math.e * self.variance)))


def bandit_posterior(k, action_dim, target=None, reward_scale=1.0):
    """Max-ent optimum of ``r(a) = -k |a - target|^2`` under a uniform prior.

    ``pi*(a) ~ exp(reward_scale * r(a))`` is Gaussian with mean ``target``
    and per-dimension variance ``1 / (2 k reward_scale)``.
    """
    if k <= 0:
        raise OracleError(f"k must be positive, got {k}")
    if reward_scale <= 0:
        raise OracleError(f"reward_scale must be positive, got {reward_scale}")
    mean = np.zeros(action_dim) if target is None else np.asarray(target, dtype=np.float64)
    if mean.shape != (action_dim,):
        raise OracleError(f"target must have shape ({action_dim},)")
    var = np.full(action_dim, 1.0 / (2.0 * k * reward_scale))
    return DiagonalGaussian(mean, var)


def monte_carlo_kl(policy, obs, reference, n, rng):
    """``KL(policy(.|obs) || reference)`` from ``n`` policy samples."""
    obs = np.broadcast_to(np.asarray(obs, dtype=np.float64), (n, policy.obs_dim))
    a, logp, _ = policy.sample(obs, rng)
    return float(np.mean(logp - reference.log_density(a)))
