"""Fast cross-checks of the learners against the reference computations.

Used by the ``oracle-check`` subcommand. Each check returns
``(name, passed, detail)``.
"""

from __future__ import annotations

import numpy as np

from . import oracle
from .autodiff import make_rng
from .envs import random_tabular_mdp, risky_branch_mdp
from .flow import FlowPolicy


def _perturbed_policy(obs_dim, action_dim, rng, scale=0.3):
    pol = FlowPolicy(obs_dim, action_dim, rng, embed_hidden=16)
    for p in pol.params():
        p.data[...] += scale * rng.standard_normal(p.data.shape)
    return pol


def check_tabular(n_instances=50, seed=0):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        mdp = random_tabular_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)),
                                 int(rng.integers(1, 5)), deterministic=True)
        post = oracle.enumerate_posterior(mdp).policy
        soft = oracle.soft_value_iteration(mdp).policy
        worst = max(worst, float(np.max(np.abs(post - soft))))
    return "posterior == soft VI (deterministic)", worst < 1e-9, f"max |diff| {worst:.2e}"


def check_risky():
    mdp = risky_branch_mdp()
    post = oracle.enumerate_posterior(mdp).policy
    soft = oracle.soft_value_iteration(mdp)
    j_post = oracle.policy_objective(mdp, post)
    j_soft = oracle.policy_objective(mdp, soft.policy)
    ok = post[0, 0, 1] > soft.policy[0, 0, 1] and j_soft > j_post
    return ("risky branch: posterior optimistic", ok,
            f"P(gamble) {post[0, 0, 1]:.3f} vs {soft.policy[0, 0, 1]:.4f}; "
            f"objective {j_post:.3f} vs {j_soft:.3f}")


def check_bijectivity(seed=0):
    rng = make_rng(seed)
    worst = 0.0
    for dim in (1, 2, 3, 6):
        pol = _perturbed_policy(4, dim, rng)
        h = rng.standard_normal((200, dim))
        s = rng.standard_normal((200, 4))
        a, _ = pol.forward(h, s)
        back, _ = pol.inverse(a, s)
        worst = max(worst, float(np.max(np.abs(back - h))))
    return "flow round trip", worst < 1e-9, f"max error {worst:.2e}"


def check_log_det(seed=0, n=20):
    rng = make_rng(seed)
    worst = 0.0
    for dim in (2, 3, 4):
        pol = _perturbed_policy(3, dim, rng)
        for _ in range(n):
            h, s = rng.standard_normal(dim), rng.standard_normal(3)
            _, ld = pol.forward(h, s)
            num = oracle.log_abs_det(oracle.numeric_jacobian(lambda z, o: pol.forward(z, o)[0], h, s))
            worst = max(worst, abs(ld - num) / max(abs(num), 1e-3))
    return "log-det vs numeric Jacobian", worst < 1e-4, f"max rel error {worst:.2e}"


def check_normalisation(seed=0):
    rng = make_rng(seed)
    masses = []
    # larger weights move mass outside the box, which tests the grid, not the flow
    for pert in (0.0, 0.05):
        pol = _perturbed_policy(2, 2, rng, scale=pert)
        masses.append(oracle.grid_integrate_density(pol, rng.standard_normal(2), resolution=300))
    ok = all(abs(m - 1.0) < 0.02 for m in masses)
    return "density integrates to 1", ok, ", ".join(f"{m:.4f}" for m in masses)


CHECKS = (check_tabular, check_risky, check_bijectivity, check_log_det, check_normalisation)


def run_checks(seed=0):
    results = []
    for fn in CHECKS:
        try:
            results.append(fn(seed=seed) if "seed" in fn.__code__.co_varnames else fn())
        except Exception as exc:  # noqa: BLE001 - reported as a failed check
            results.append((fn.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
