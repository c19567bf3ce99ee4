"""Figures written next to the CSV outputs of a run."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .envs import GOAL_RADIUS, GOALS, PointMass2D  # noqa: E402


def plot_learning_curves(rows_by_layer, path, title=None):
    """Mean return (+- std) and entropy estimate against env steps, one line per layer."""
    fig, (ax_r, ax_h) = plt.subplots(1, 2, figsize=(10, 3.8))
    for layer, rows in sorted(rows_by_layer.items()):
        if not rows:
            continue
        steps = np.array([float(r["total_env_steps"]) for r in rows])
        mean = np.array([float(r["mean_return"]) for r in rows])
        std = np.array([float(r["std_return"]) for r in rows])
        ent = np.array([float(r["entropy_estimate"]) for r in rows])
        ax_r.plot(steps, mean, label=f"layer {layer}")
        ax_r.fill_between(steps, mean - std, mean + std, alpha=0.2)
        ax_h.plot(steps, ent, label=f"layer {layer}")
    ax_r.set_xlabel("environment steps")
    ax_r.set_ylabel("evaluation return")
    ax_h.set_xlabel("environment steps")
    ax_h.set_ylabel("entropy estimate (nats)")
    ax_r.legend(loc="best", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectories(trajectories, path, env=None, title=None):
    """Planar x-y paths (first two state coordinates) with walls and goals."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if isinstance(env, PointMass2D):
        for (x0, y0), (x1, y1) in env.walls:
            ax.plot([x0, x1], [y0, y1], color="k", lw=2)
        for i, g in GOALS.items():
            active = env.goal is not None and np.allclose(env.goal, g)
            ax.add_patch(plt.Circle(g, GOAL_RADIUS, color="tab:green" if active else "0.8",
                                    alpha=0.6))
    for traj in trajectories:
        pts = np.array([np.asarray(s)[:2] for s in traj["states"]])
        if len(pts) == 0:
            continue
        ax.plot(pts[:, 0], pts[:, 1], lw=0.8, alpha=0.8)
        ax.plot(pts[0, 0], pts[0, 1], "o", ms=3, color="tab:blue")
    ax.set_aspect("equal")
    if isinstance(env, PointMass2D) and env.walls:
        ax.set_xlim(-0.1, 4.1)
        ax.set_ylim(-0.1, 4.1)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
