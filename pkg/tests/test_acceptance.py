"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtime limits are part of each criterion and are asserted alongside the
numerical tolerances.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from latentstack import autodiff as ad
from latentstack import oracle
from latentstack.checks import _perturbed_policy
from latentstack.config import EnvConfig, load_config
from latentstack.envs import (PointMass2D, PointMaze, QuadraticBandit, ScaledRewards,
                              random_tabular_mdp, risky_branch_mdp)
from latentstack.experiment import evaluate, run
from latentstack.flow import FlowPolicy
from latentstack.hierarchy import (EmbeddedEnvironment, LayerStack, build_embedded, compose,
                                   freeze, params_hash, top_environment)
from latentstack.sac import Trainer, TrainerConfig, evaluate_policy, train

from helpers import gradcheck

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
MAZE_SEEDS = (0, 1, 2, 3, 4)
MAZE_EVAL_ROLLOUTS = 20


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail, seconds, limit):
        ok = bool(ok) and seconds < limit
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail} "
                  f"[{seconds:.1f}s, limit {limit:.0f}s]")
        return ok
    return emit


def test_01_flow_bijectivity(report):
    t0 = time.perf_counter()
    rng = ad.make_rng(101)
    worst = 0.0
    for dim in (1, 2, 3, 6):
        pol = _perturbed_policy(5, dim, rng, scale=0.5)
        h, s = rng.standard_normal((1000, dim)) * 2.0, rng.standard_normal((1000, 5))
        a, _ = pol.forward(h, s)
        back, _ = pol.inverse(a, s)
        worst = max(worst, float(np.max(np.abs(back - h))))
    ok = report(1, "flow bijectivity", worst < 1e-9, f"max round-trip error {worst:.2e}",
                time.perf_counter() - t0, 10)
    assert ok


def test_02_change_of_variables(report):
    t0 = time.perf_counter()
    rng = ad.make_rng(102)
    worst = 0.0
    for dim in (2, 3, 4):
        pol = _perturbed_policy(3, dim, rng, scale=0.5)
        for _ in range(200):
            h, s = rng.standard_normal(dim), rng.standard_normal(3)
            _, ld = pol.forward(h, s)
            jac = oracle.numeric_jacobian(lambda z, o: pol.forward(z, o)[0], h, s)
            num = oracle.log_abs_det(jac)
            worst = max(worst, abs(ld - num) / max(abs(num), 1e-3))
    ok = report(2, "change of variables", worst < 1e-4, f"max relative error {worst:.2e}",
                time.perf_counter() - t0, 30)
    assert ok


def test_03_density_normalisation(report):
    t0 = time.perf_counter()
    rng = ad.make_rng(103)
    masses = [oracle.grid_integrate_density(FlowPolicy(2, 2, rng), np.zeros(2), resolution=300)]
    for _ in range(3):
        pol = _perturbed_policy(2, 2, rng, scale=0.05)
        masses.append(oracle.grid_integrate_density(pol, rng.standard_normal(2), resolution=300))
    worst = max(abs(m - 1.0) for m in masses)
    ok = report(3, "density normalisation", worst < 0.02,
                "masses " + ", ".join(f"{m:.4f}" for m in masses),
                time.perf_counter() - t0, 60)
    assert ok


def _random_batch(rng, trainer, n):
    env = trainer.env
    obs = np.stack([env.reset(rng) for _ in range(n)]) + rng.standard_normal((n, 6))
    act = np.clip(2.0 * rng.standard_normal((n, 2)), -2.0, 2.0)
    rew = rng.standard_normal(n)
    nobs = obs + 0.1 * rng.standard_normal((n, 6))
    done = (rng.random(n) < 0.2).astype(np.float64)
    h = trainer.policy.prior.sample(rng, n)
    return obs, act, rew, nobs, done, h


def test_04_autodiff_soundness(report):
    # full-size Q, V and flow networks; the losses are the trainer's own
    t0 = time.perf_counter()
    rng = ad.make_rng(104)
    worst = {"q": 0.0, "v": 0.0, "policy": 0.0}
    for draw in range(100):
        prior = "gaussian" if draw % 2 else "uniform"
        env = PointMaze(draw % 3)
        pol = FlowPolicy(6, 2, ad.make_rng(draw))
        tr = Trainer(env, pol, TrainerConfig(seed=draw, action_prior=prior))
        nets = [tr.nets.q, tr.nets.v, tr.nets.v_target, pol]
        for net in nets:
            for p in net.params():
                p.data[...] += 0.1 * rng.standard_normal(p.data.shape)
        batch = _random_batch(rng, tr, 8)

        def loss(i):
            return lambda: tr.losses_t(*batch)[i]

        worst["q"] = max(worst["q"], gradcheck(loss(0), tr.nets.q.params(), rng, max_coords=4))
        worst["v"] = max(worst["v"], gradcheck(loss(1), tr.nets.v.params(), rng, max_coords=4))
        worst["policy"] = max(worst["policy"],
                              gradcheck(loss(2), pol.params(), rng, max_coords=4))
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    ok = report(4, "autodiff soundness", max(worst.values()) < 1e-4,
                f"max relative error over 100 draws: {detail}", time.perf_counter() - t0, 120)
    assert ok


def test_05_inference_oracles(report):
    t0 = time.perf_counter()
    rng = ad.make_rng(105)
    worst = 0.0
    for _ in range(50):
        mdp = random_tabular_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)),
                                 int(rng.integers(1, 5)), deterministic=True)
        post = oracle.enumerate_posterior(mdp).policy
        soft = oracle.soft_value_iteration(mdp).policy
        worst = max(worst, float(np.max(np.abs(post - soft))))
    mdp = risky_branch_mdp()
    post = oracle.enumerate_posterior(mdp).policy
    soft = oracle.soft_value_iteration(mdp).policy
    j_post, j_soft = oracle.policy_objective(mdp, post), oracle.policy_objective(mdp, soft)
    optimistic = post[0, 0, 1] > soft[0, 0, 1]
    ok = report(5, "inference oracles", worst < 1e-9 and optimistic and j_soft > j_post,
                f"max |posterior - soft VI| {worst:.1e}; risky P(gamble) "
                f"{post[0, 0, 1]:.3f} > {soft[0, 0, 1]:.4f}; objective {j_soft:.3f} > {j_post:.3f}",
                time.perf_counter() - t0, 60)
    assert ok


def test_06_bandit_converges_to_closed_form(report, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(os.path.join(CONFIGS, "bandit.yaml"))
    res = run(config=cfg, out=str(tmp_path))
    assert res.status == 0, res.error
    layer = cfg.layers[0]
    assert layer.trainer.total_epochs <= 30 and layer.trainer.reward_scale == 1.0
    ref = oracle.bandit_posterior(0.5, 2, target=[1.0, -1.0])
    kl = oracle.monte_carlo_kl(res.stack.layers[0], np.ones(1), ref, 100_000, ad.make_rng(106))
    ok = report(6, "bandit max-ent optimum", kl < 0.05, f"KL {kl:.4f} nats after "
                f"{layer.trainer.total_epochs} epochs", time.perf_counter() - t0, 300)
    assert ok


def _trained_like_layer(seed):
    pol = FlowPolicy(6, 2, ad.make_rng(seed), embed_hidden=32)
    rng = ad.make_rng(seed + 1)
    for p in pol.params():
        p.data[...] += 0.3 * rng.standard_normal(p.data.shape)
    return pol


def test_07_embedding_semantics(report):
    t0 = time.perf_counter()
    layers = [_trained_like_layer(s) for s in (10, 20, 30)]
    frozen = [freeze(f) for f in layers]
    hashes = [params_hash(f) for f in frozen]
    stack = LayerStack(layers=frozen, priors=["gaussian"] * 3, rewards=["velocity_norm"] * 3,
                       latent_modes=["per_step"] * 3, holds=[1, 1, 1], metrics=[[], [], []],
                       hashes=list(hashes))
    comp = compose(stack)
    worst = 0.0
    for trial in range(10):
        latents = ad.make_rng(700 + trial).standard_normal((120, 2))
        emb = build_embedded(PointMaze(trial % 3), stack)
        base = PointMaze(trial % 3)
        o_emb = emb.reset(ad.make_rng(trial))
        o_base = base.reset(ad.make_rng(trial))
        for h in latents:
            o_emb, r_emb, d_emb = emb.step(h)
            o_base, r_base, d_base = base.step(comp.forward(h, o_base)[0])
            worst = max(worst, float(np.max(np.abs(o_emb - o_base))))
            assert d_emb == d_base and r_emb == r_base
            if d_emb:
                break
    # training a new top layer on the embedded env leaves the frozen layers alone
    top = FlowPolicy(6, 2, ad.make_rng(40), embed_hidden=16)
    cfg = TrainerConfig(total_epochs=1, steps_per_epoch=200, min_pool_size=50, batch_size=16,
                        hidden_units=16, eval_rollouts=1, action_prior="gaussian")
    train(EmbeddedEnvironment(PointMaze(0), compose(stack)), top, cfg, "sparse_goal")
    unchanged = [params_hash(f) for f in frozen] == hashes == stack.hashes
    ok = report(7, "layer embedding semantics", worst <= 1e-12 and unchanged,
                f"max state difference {worst:.1e}; frozen hashes unchanged: {unchanged}",
                time.perf_counter() - t0, 60)
    assert ok


def _with_goal(cfg, goal):
    return dataclasses.replace(cfg, env=EnvConfig("point_maze", {"goal_index": goal}))


def _success(res, seed):
    assert res.status == 0, res.error
    ev = evaluate(os.path.join(res.run_dir, "stack.json"), n_rollouts=MAZE_EVAL_ROLLOUTS,
                  seed=10_000 + seed, record=False)
    return ev["success_rate"]


def _maze_steps(layer):
    t = layer.trainer
    return t.total_epochs * t.steps_per_epoch * t.hold_n


def test_08_hierarchy_beats_flat_on_maze(report, tmp_path):
    # the pretrained layer is goal independent, so each seed pretrains once and
    # stacks one high level per goal on it; pretraining steps are not charged
    # to the maze budget. The flat agent gets the same number of maze steps on
    # the goal where the seed's two-level agent did best.
    t0 = time.perf_counter()
    two = load_config(os.path.join(CONFIGS, "maze_two_level.yaml"))
    flat = load_config(os.path.join(CONFIGS, "maze_flat.yaml"))
    budget_h, budget_f = _maze_steps(two.layers[-1]), _maze_steps(flat.layers[0])
    assert budget_f == budget_h, "flat baseline must get the same maze step budget"
    out = str(tmp_path)
    per_goal = np.zeros((len(MAZE_SEEDS), 3))
    best, flat_success = [], []
    for k, seed in enumerate(MAZE_SEEDS):
        cfg = two.with_overrides(seed=seed)
        pre = run(config=cfg, out=out, n_layers=1)
        assert pre.status == 0, pre.error
        low = os.path.join(pre.run_dir, "layer0.json")
        for goal in range(3):
            per_goal[k, goal] = _success(run(config=_with_goal(cfg, goal), out=out,
                                             resume=low), seed)
        g = int(np.argmax(per_goal[k]))
        best.append(float(per_goal[k, g]))
        fcfg = _with_goal(flat.with_overrides(seed=seed), g)
        flat_success.append(_success(run(config=fcfg, out=out), seed))
    ok = report(8, "hierarchy vs flat on the maze",
                np.mean(best) >= 0.8 and np.mean(flat_success) <= 0.2,
                f"{budget_h} maze steps each; two-level best goal per seed {best} "
                f"(mean {np.mean(best):.2f}), flat on the same goal {flat_success} "
                f"(mean {np.mean(flat_success):.2f}); two-level mean per goal "
                f"{np.round(per_goal.mean(axis=0), 2).tolist()}",
                time.perf_counter() - t0, 1800)
    assert ok


def test_09_reward_scale_equivalence(report):
    t0 = time.perf_counter()

    def trace(env, rs, seed):
        cfg = TrainerConfig(total_epochs=3, steps_per_epoch=300, min_pool_size=100,
                            batch_size=64, reward_scale=rs, seed=seed, eval_rollouts=3)
        pol = FlowPolicy(env.spec.observation_dim, env.spec.action_dim, ad.make_rng(seed))
        tr = Trainer(env, pol, cfg)
        _, rows, _ = train(env, pol, cfg, trainer=tr)
        rewards = tr.pool.batch(np.arange(len(tr.pool)))[2].copy()
        return ([(r.q_loss, r.v_loss, r.policy_loss, r.entropy_estimate) for r in rows],
                [p.data.copy() for p in pol.params()], rewards)

    c = 8.0
    same = True
    for make_env, rs in ((QuadraticBandit, 1.0), (PointMass2D, 0.5)):
        a = trace(make_env(), rs, 9)
        b = trace(ScaledRewards(make_env(), c), rs / c, 9)
        same &= a[0] == b[0] and np.array_equal(a[2], b[2])
        same &= all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))
    ok = report(9, "reward-scale equivalence", same,
                f"c = {c:g}: losses, stored rewards and parameters bit-identical: {same}",
                time.perf_counter() - t0, 120)
    assert ok


DET_CONFIG = """\
seed: 5
output_dir: {out}
eval_rollouts: 3
env: {{name: point_maze, params: {{goal_index: 2}}}}
layers:
  - reward: velocity_norm
    env: {{name: point_maze_pretrain, params: {{goal_index: 2}}}}
    prior: gaussian
    trainer: {{total_epochs: 2, steps_per_epoch: 300, min_pool_size: 100, batch_size: 32}}
  - reward: sparse_goal
    latent_mode: hold_n
    hold_n: 3
    trainer: {{total_epochs: 2, steps_per_epoch: 300, min_pool_size: 100, batch_size: 32}}
"""


def test_10_determinism_and_persistence(report, tmp_path):
    t0 = time.perf_counter()
    path = tmp_path / "det.yaml"
    path.write_text(DET_CONFIG.format(out=tmp_path / "runs"))
    a, b = run(path), run(path)
    assert a.status == b.status == 0
    read = lambda r, name: open(os.path.join(r.run_dir, name), "rb").read()  # noqa: E731
    same_metrics = read(a, "metrics.csv") == read(b, "metrics.csv")
    env = top_environment(PointMaze(2), a.stack)
    direct = evaluate_policy(env, a.stack.layers[-1], 10, 77, "velocity_norm",
                             env.spec.max_episode_steps, latent_mode=a.stack.latent_modes[-1])
    loaded = evaluate(os.path.join(a.run_dir, "stack.json"), n_rollouts=10, seed=77,
                      reward="velocity_norm")
    same_returns = loaded["returns"] == direct["returns"] and len(set(direct["returns"])) > 1
    ok = report(10, "determinism and persistence", same_metrics and same_returns,
                f"metrics.csv byte-identical: {same_metrics}; "
                f"reloaded evaluation returns identical: {same_returns}",
                time.perf_counter() - t0, 120)
    assert ok
