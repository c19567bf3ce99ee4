"""Run orchestration: config -> trained stack, CSV logs, checkpoints, figures.

Layout of a run directory ``<output_dir>/<UTC timestamp>-<config hash>``::

    config.yaml            resolved configuration
    manifest.json          hashes, status, per-layer parameter digests
    metrics.csv            every epoch of every layer, fixed header
    layer<i>_metrics.csv   per-layer rows with local epochs and success rate
    timing.csv             real wall-clock seconds per epoch
    layer<i>.json          frozen layer checkpoints
    stack.json             all layers in one checkpoint
    learning_curves.png
    error.json             only when the run failed
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import traceback
from dataclasses import dataclass

import numpy as np

from .checkpoint import as_stack, load_checkpoint, save_checkpoint
from .config import ConfigError, EnvConfig, dump_config, load_config
from .hierarchy import (LayerSpec, LayerTrainingError, action_hold, sampling_mode,
                        top_environment, train_layerwise)
from .plotting import plot_learning_curves, plot_trajectories
from .sac import METRIC_FIELDS, TrainingDivergence, evaluate_policy

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3
LAYER_FIELDS = METRIC_FIELDS + ("success_rate",)


@dataclass
class RunResult:
    status: int
    run_dir: str = None
    stack: object = None
    error: str = None


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


class CsvLog:
    """Append-only CSV writer that flushes after every row."""

    def __init__(self, path, header):
        self.path = path
        self.header = tuple(header)
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.header)

    def write(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in self.header])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def make_run_dir(root, config_hash, now=None):
    now = now or _dt.datetime.now(_dt.timezone.utc)
    base = os.path.join(root, f"{now.strftime('%Y%m%dT%H%M%S')}-{config_hash[:10]}")
    path, k = base, 1
    while os.path.exists(path):
        path = f"{base}-{k}"
        k += 1
    os.makedirs(path)
    return path


def _layer_specs(cfg, start):
    specs = []
    for layer in cfg.layers[start:]:
        env = layer.env.build() if layer.env is not None else None
        specs.append(LayerSpec(layer.reward, layer.trainer, env))
    return specs


def _nominal_hold(holds):
    return int(np.prod(holds)) if holds else 1


def run(config_path=None, config=None, seed=None, out=None, n_layers=None, resume=None):
    """Train the layers of an experiment config; returns a :class:`RunResult`.

    ``resume`` names a layer or stack checkpoint whose layers are reused as
    the bottom of the hierarchy; only the config layers above them train.
    """
    try:
        cfg = config if config is not None else load_config(config_path)
        cfg = cfg.with_overrides(seed=seed, output_dir=out, n_layers=n_layers)
        env = cfg.env.build()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return RunResult(EXIT_CONFIG, error=str(exc))

    stack = None
    if resume is not None:
        try:
            obj, meta = load_checkpoint(resume, expected_obs_dim=env.spec.observation_dim)
        except OSError as exc:
            log.error("cannot read checkpoint: %s", exc)
            return RunResult(EXIT_IO, error=str(exc))
        except ValueError as exc:
            log.error("bad checkpoint: %s", exc)
            return RunResult(EXIT_CONFIG, error=str(exc))
        stack = as_stack(obj, meta)
        if len(stack) >= len(cfg.layers):
            msg = (f"checkpoint already holds {len(stack)} layers; the config defines "
                   f"{len(cfg.layers)}, so there is nothing to add")
            log.error(msg)
            return RunResult(EXIT_CONFIG, error=msg)
    start = 0 if stack is None else len(stack)
    chash = cfg.config_hash()

    try:
        run_dir = make_run_dir(cfg.output_dir, chash)
        with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
            fh.write(dump_config(cfg))
        metrics = CsvLog(os.path.join(run_dir, "metrics.csv"), METRIC_FIELDS)
        timing = CsvLog(os.path.join(run_dir, "timing.csv"),
                        ("layer", "epoch", "wall_clock_seconds"))
    except OSError as exc:
        log.error("cannot create run directory: %s", exc)
        return RunResult(EXIT_IO, error=str(exc))
    log.info("run directory %s", run_dir)

    state = {"epoch": 0, "offset": 0, "layer_logs": {}}
    base_meta = {"config_hash": chash, "env": dataclasses.asdict(cfg.env), "seed": cfg.seed}
    holds_so_far = list(stack.holds) if stack is not None else []

    def on_epoch(i, row, trainer):
        lcfg = cfg.layers[i].trainer
        hold = action_hold(lcfg)
        factor = _nominal_hold(holds_so_far[:i] + [hold])
        if i not in state["layer_logs"]:
            state["layer_logs"][i] = CsvLog(os.path.join(run_dir, f"layer{i}_metrics.csv"),
                                            LAYER_FIELDS)
        rec = dataclasses.asdict(row)
        state["layer_logs"][i].write(rec)
        timing.write({"layer": i, "epoch": row.epoch, "wall_clock_seconds": row.wall_clock_seconds})
        glob = dict(rec, epoch=state["epoch"],
                    total_env_steps=state["offset"] + factor * row.total_env_steps,
                    wall_clock_seconds=row.wall_clock_seconds if cfg.log_wall_clock else 0.0)
        metrics.write(glob)
        state["epoch"] += 1
        if lcfg.total_epochs == row.epoch + 1:
            state["offset"] = glob["total_env_steps"]
        every = cfg.checkpoint_every
        if every and (row.epoch + 1) % every == 0:
            save_checkpoint(os.path.join(run_dir, f"layer{i}_epoch{row.epoch + 1}.json"),
                            trainer.policy, _layer_meta(base_meta, cfg, i, row.epoch + 1))

    try:
        stack = _train(env, cfg, start, stack, on_epoch, run_dir, base_meta, holds_so_far)
    except (LayerTrainingError, TrainingDivergence) as exc:
        layer = getattr(exc, "layer", None)
        cause = getattr(exc, "cause", exc)
        status = EXIT_IO if isinstance(cause, OSError) else EXIT_DIVERGENCE
        _write_error(run_dir, status, cause, layer)
        log.error("training failed: %s", exc)
        return RunResult(status, run_dir, error=str(exc))
    except OSError as exc:
        _write_error(run_dir, EXIT_IO, exc, None)
        log.error("I/O error: %s", exc)
        return RunResult(EXIT_IO, run_dir, error=str(exc))

    try:
        save_checkpoint(os.path.join(run_dir, "stack.json"), stack, base_meta)
        _write_manifest(run_dir, cfg, stack, "ok")
        render_report(run_dir)
    except OSError as exc:
        _write_error(run_dir, EXIT_IO, exc, None)
        return RunResult(EXIT_IO, run_dir, stack, error=str(exc))
    return RunResult(EXIT_OK, run_dir, stack)


def _layer_meta(base_meta, cfg, i, epoch=None):
    layer = cfg.layers[i]
    tc = layer.trainer
    meta = dict(base_meta, index=i, reward=layer.reward,
                prior=tc.action_prior if i == 0 else "gaussian",
                latent_mode=sampling_mode(tc), hold=action_hold(tc),
                train_env=dataclasses.asdict(layer.env) if layer.env is not None else None)
    if epoch is not None:
        meta["epoch"] = epoch
    return meta


def _train(env, cfg, start, stack, on_epoch, run_dir, base_meta, holds_so_far):
    specs = _layer_specs(cfg, start)
    for k, spec in enumerate(specs):
        i = start + k
        stack = train_layerwise(env, [spec], stack=stack, callback=on_epoch)
        holds_so_far.append(stack.holds[-1])
        save_checkpoint(os.path.join(run_dir, f"layer{i}.json"), stack.layers[-1],
                        _layer_meta(base_meta, cfg, i))
    return stack


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (str, int, bool)) or x is None:
        return x
    return repr(x)


def _write_manifest(run_dir, cfg, stack, status):
    doc = {"status": status, "config_hash": cfg.config_hash(), "seed": cfg.seed,
           "layers": [{"reward": r, "prior": p, "hold": h, "params_sha256": d}
                      for r, p, h, d in zip(stack.rewards, stack.priors, stack.holds, stack.hashes)],
           "numpy": np.__version__}
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2)


def _write_error(run_dir, status, exc, layer):
    doc = {"status": status, "error_type": type(exc).__name__, "message": str(exc),
           "layer": layer, "diagnostics": _jsonable(getattr(exc, "diagnostics", None)),
           "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__),
           "partial_outputs": sorted(os.listdir(run_dir))}
    try:
        with open(os.path.join(run_dir, "error.json"), "w") as fh:
            json.dump(doc, fh, indent=2)
    except OSError:
        log.exception("could not write error manifest")


# ---------------------------------------------------------------------------
# evaluation and reports

def evaluate(checkpoint, env=None, n_rollouts=10, seed=0, reward=None, record=True):
    """Roll out a saved layer or stack on ``env`` (default: the env in its metadata).

    Returns a dict with ``returns``, ``mean_return``, ``std_return``,
    ``success_rate`` and, when ``record``, per-rollout trajectories as
    ``{"states", "actions", "rewards"}`` lists.
    """
    if env is None:
        obj, meta = load_checkpoint(checkpoint)
        env_meta = meta.get("env")
        if not env_meta:
            raise ValueError(f"{checkpoint} records no environment; pass one explicitly")
        env = EnvConfig(env_meta["name"], env_meta.get("params", {})).build()
    else:
        obj, meta = load_checkpoint(checkpoint)
    stack = as_stack(obj, meta)
    spec = env.spec
    if stack.layers[0].obs_dim != spec.observation_dim or stack.layers[0].action_dim != spec.action_dim:
        raise ValueError(f"checkpoint dims (obs {stack.layers[0].obs_dim}, act "
                         f"{stack.layers[0].action_dim}) do not match environment "
                         f"(obs {spec.observation_dim}, act {spec.action_dim})")
    top = top_environment(env, stack)
    channel = reward or stack.rewards[-1] or spec.task_channel
    if channel not in spec.reward_channels:
        channel = spec.task_channel
    res = evaluate_policy(top, stack.layers[-1], n_rollouts, seed, channel,
                          top.spec.max_episode_steps, latent_mode=stack.latent_modes[-1],
                          record=record)
    res["reward_channel"] = channel
    if record:
        res["trajectories"] = [
            {"states": [s for s, _, _ in tr], "actions": [a for _, a, _ in tr],
             "rewards": [r for _, _, r in tr]} for tr in res["trajectories"]]
    res["env"] = env
    return res


def write_evaluation(result, out_dir, prefix="evaluation"):
    os.makedirs(out_dir, exist_ok=True)
    summary = CsvLog(os.path.join(out_dir, f"{prefix}.csv"), ("rollout", "return", "success"))
    trajs = result.get("trajectories") or []
    for i, ret in enumerate(result["returns"]):
        ok = bool(result["successes"][i])
        summary.write({"rollout": i, "return": float(ret), "success": int(ok)})
    if trajs:
        sdim = len(trajs[0]["states"][0]) if trajs[0]["states"] else 0
        adim = len(trajs[0]["actions"][0]) if trajs[0]["actions"] else 0
        header = (("rollout", "step") + tuple(f"s{j}" for j in range(sdim))
                  + tuple(f"a{j}" for j in range(adim)) + ("reward",))
        path = os.path.join(out_dir, f"{prefix}_trajectories.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, tr in enumerate(trajs):
                for t, (s, a, r) in enumerate(zip(tr["states"], tr["actions"], tr["rewards"])):
                    w.writerow([i, t] + [repr(float(x)) for x in np.ravel(s)]
                               + [repr(float(x)) for x in np.ravel(a)] + [repr(float(r))])
        if sdim >= 2:
            plot_trajectories(trajs, os.path.join(out_dir, f"{prefix}_trajectories.png"),
                              env=getattr(result.get("env"), "base", result.get("env")),
                              title=f"success {result['success_rate']:.0%}")
    with open(os.path.join(out_dir, f"{prefix}.json"), "w") as fh:
        json.dump({k: _jsonable(result[k]) for k in
                   ("returns", "mean_return", "std_return", "success_rate", "reward_channel")
                   if k in result}, fh, indent=2)


def render_report(run_dir, n_rollouts=None, seed=0):
    """Learning-curve figure from the CSVs; trajectory figure if a stack exists."""
    per_layer = {}
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("layer") and name.endswith("_metrics.csv"):
            per_layer[int(name[5:-len("_metrics.csv")])] = read_csv(os.path.join(run_dir, name))
    if not per_layer:
        raise FileNotFoundError(f"no layer metrics found in {run_dir}")
    outputs = [plot_learning_curves(per_layer, os.path.join(run_dir, "learning_curves.png"))]
    stack_path = os.path.join(run_dir, "stack.json")
    if n_rollouts and os.path.exists(stack_path):
        res = evaluate(stack_path, n_rollouts=n_rollouts, seed=seed)
        write_evaluation(res, run_dir, prefix="report")
        outputs.append(os.path.join(run_dir, "report.csv"))
    return outputs
