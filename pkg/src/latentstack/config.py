"""Experiment configuration files (YAML) with strict key checking.

Schema::

    seed: 0
    output_dir: runs
    eval_rollouts: 10
    log_wall_clock: false      # real timings always go to timing.csv
    checkpoint_every: 0        # also save layer checkpoints every N epochs
    env: {name: point_maze, params: {goal_index: 0}}
    layers:
      - reward: velocity_norm
        env: {name: point_maze_pretrain, params: {goal_index: 0}}   # optional
        prior: gaussian                     # uniform | gaussian
        latent_mode: per_step               # per_step | per_rollout | hold_n
        hold_n: 1                           # environment steps per action of this layer
        trainer: {total_epochs: 10, reward_scale: 1.0}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .envs import make_env
from .sac import TrainerConfig


class ConfigError(ValueError):
    pass


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that remembers the source line of every mapping key."""


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=True)
    lines = {}
    for key_node, _ in node.value:
        lines[loader.construct_object(key_node)] = key_node.start_mark.line + 1
    return _Mapping(mapping, lines)


class _Mapping(dict):
    def __init__(self, data, lines):
        super().__init__(data)
        self.lines = lines


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(mapping, key):
    lines = getattr(mapping, "lines", {})
    return f"line {lines[key]}: " if key in lines else ""


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping")
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"{_line(mapping, key)}unknown key {key!r} in {where}; "
                              f"allowed: {', '.join(sorted(allowed))}")


@dataclass
class EnvConfig:
    name: str
    params: dict = field(default_factory=dict)

    def build(self):
        return make_env(self.name, **self.params)


@dataclass
class LayerConfig:
    reward: str
    trainer: TrainerConfig
    env: EnvConfig = None


@dataclass
class ExperimentConfig:
    env: EnvConfig
    layers: list
    seed: int = 0
    output_dir: str = "runs"
    eval_rollouts: int = 10
    log_wall_clock: bool = False
    checkpoint_every: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, output_dir=None, n_layers=None):
        cfg = dataclasses.replace(self)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed),
                                      layers=[_seeded(l, int(seed), i) for i, l in enumerate(cfg.layers)])
        if output_dir is not None:
            cfg = dataclasses.replace(cfg, output_dir=str(output_dir))
        if n_layers is not None:
            if not 1 <= n_layers <= len(cfg.layers):
                raise ConfigError(f"--layers must lie in [1, {len(cfg.layers)}], got {n_layers}")
            cfg = dataclasses.replace(cfg, layers=cfg.layers[:n_layers])
        return cfg


def _seeded(layer, seed, i):
    return dataclasses.replace(layer, trainer=dataclasses.replace(layer.trainer,
                                                                  seed=seed * 1000 + i))


_TOP = {"seed", "output_dir", "eval_rollouts", "log_wall_clock", "checkpoint_every", "env", "layers"}
_ENV = {"name", "params"}
_LAYER = {"reward", "env", "prior", "latent_mode", "hold_n", "trainer"}
_TRAINER = {f.name for f in dataclasses.fields(TrainerConfig)} - {"seed", "action_prior",
                                                                    "latent_mode", "hold_n",
                                                                    "eval_rollouts"}


def _env_config(raw, where):
    _check_keys(raw, _ENV, where)
    if "name" not in raw:
        raise ConfigError(f"{where} is missing required key 'name'")
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError(f"{_line(raw, 'params')}{where}.params must be a mapping")
    env = EnvConfig(str(raw["name"]), dict(params))
    try:
        env.build()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_line(raw, 'name')}{where}: {exc}") from None
    return env


def parse_config(data):
    """Validate a parsed YAML document into an :class:`ExperimentConfig`."""
    if data is None:
        raise ConfigError("configuration is empty")
    _check_keys(data, _TOP, "top level")
    for key in ("env", "layers"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{_line(data, 'seed')}seed must be a non-negative integer")
    eval_rollouts = data.get("eval_rollouts", 10)
    env = _env_config(data["env"], "env")
    raw_layers = data["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ConfigError(f"{_line(data, 'layers')}layers must be a non-empty list")
    layers = []
    for i, raw in enumerate(raw_layers):
        where = f"layers[{i}]"
        _check_keys(raw, _LAYER, where)
        if "reward" not in raw:
            raise ConfigError(f"{where} is missing required key 'reward'")
        tr_raw = raw.get("trainer") or {}
        _check_keys(tr_raw, _TRAINER, f"{where}.trainer")
        try:
            trainer = TrainerConfig(**dict(tr_raw), seed=seed * 1000 + i,
                                    action_prior=raw.get("prior", "uniform" if i == 0 else "gaussian"),
                                    latent_mode=raw.get("latent_mode", "per_step"),
                                    hold_n=int(raw.get("hold_n", 1)),
                                    eval_rollouts=int(eval_rollouts))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{_line(data, 'layers')}{where}: {exc}") from None
        layer_env = _env_config(raw["env"], f"{where}.env") if raw.get("env") else None
        check_env = (layer_env or env).build()
        if raw["reward"] not in check_env.spec.reward_channels:
            raise ConfigError(f"{_line(raw, 'reward')}{where}: reward channel {raw['reward']!r} "
                              f"not offered by the environment {check_env.spec.reward_channels}")
        layers.append(LayerConfig(str(raw["reward"]), trainer, layer_env))
    return ExperimentConfig(env=env, layers=layers, seed=seed,
                            output_dir=str(data.get("output_dir", "runs")),
                            eval_rollouts=int(eval_rollouts),
                            log_wall_clock=bool(data.get("log_wall_clock", False)),
                            checkpoint_every=int(data.get("checkpoint_every", 0)))


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads_config(text)


def loads_config(text):
    try:
        data = yaml.load(text, Loader=_LineLoader)  # noqa: S506 - SafeLoader subclass
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark else ""
        raise ConfigError(f"{where}invalid YAML: {getattr(exc, 'problem', exc)}") from None
    return parse_config(data)


def dump_config(cfg):
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True)
