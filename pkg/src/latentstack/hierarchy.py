"""Layerwise construction of latent-space policy hierarchies.

Each trained layer is frozen and folded into the environment, so the next
layer acts in its latent space:

    p(s' | s, h) <- p(s' | s, f_i(h; s))

After ``K`` layers the hierarchy is the single bijection
``f_0 o f_1 o ... o f_{K-1}``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .flow import FlowPolicy
from .sac import TrainerConfig, train

log = logging.getLogger(__name__)


class LayerTrainingError(RuntimeError):
    def __init__(self, layer, cause):
        super().__init__(f"training of layer {layer} failed: {cause}")
        self.layer = layer
        self.cause = cause


def params_hash(policy):
    """SHA-256 over parameter names and raw float64 bytes."""
    h = hashlib.sha256()
    for p in policy.params():
        h.update((p.name or "").encode())
        h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
    return h.hexdigest()


def freeze(policy):
    """Independent copy of ``policy`` whose parameters no optimiser owns."""
    frozen = copy.deepcopy(policy)
    for p in frozen.params():
        p.requires_grad = False
        p.data.setflags(write=False)
    return frozen


class HeldActionEnvironment:
    """Repeats each action for ``hold`` steps of the wrapped environment."""

    def __init__(self, env, hold):
        if hold < 1:
            raise ValueError("hold must be at least 1")
        self.inner = env
        self.hold = int(hold)
        s = env.spec
        self.spec = dataclasses.replace(s, max_episode_steps=-(-s.max_episode_steps // self.hold))

    def _lower_action(self, h, obs):
        return h

    def reset(self, rng):
        self._obs = self.inner.reset(rng)
        return self._obs

    def step(self, action):
        total = None
        terminal = False
        for _ in range(self.hold):
            a = self._lower_action(action, self._obs)
            self._obs, rewards, terminal = self.inner.step(a)
            if total is None:
                total = dict(rewards)
            else:
                for k, v in rewards.items():
                    total[k] += v
            if terminal:
                break
        return self._obs, total, terminal

    @property
    def base(self):
        env = self.inner
        while hasattr(env, "inner"):
            env = env.inner
        return env


class EmbeddedEnvironment(HeldActionEnvironment):
    """Environment whose action is the latent of a frozen policy layer.

    ``step(h)`` applies ``f(h; s)`` to the wrapped environment, recomputed
    from the current observation on each of the ``latent_hold`` inner steps.
    Reward channels pass through (summed over held steps).
    """

    def __init__(self, env, policy, latent_hold=1):
        s = env.spec
        if policy.obs_dim != s.observation_dim or policy.action_dim != s.action_dim:
            raise ValueError(
                f"layer dims (obs {policy.obs_dim}, act {policy.action_dim}) do not match "
                f"environment (obs {s.observation_dim}, act {s.action_dim})")
        super().__init__(env, latent_hold)
        self.layer = policy
        self.spec = dataclasses.replace(self.spec, action_bounds=(-np.inf, np.inf))

    @property
    def latent_hold(self):
        return self.hold

    def _lower_action(self, h, obs):
        a, _ = self.layer.forward(h, obs)
        return a

    @property
    def frozen_layers(self):
        """Embedded layers ordered bottom (``f_0``) to top."""
        out = []
        env = self
        while isinstance(env, HeldActionEnvironment):
            if isinstance(env, EmbeddedEnvironment):
                out.append(env.layer)
            env = env.inner
        return out[::-1]


def embed_layer(env, trained_policy, latent_hold=1):
    """Freeze ``trained_policy`` and expose its latent space as the action space."""
    return EmbeddedEnvironment(env, freeze(trained_policy), latent_hold)


def hold_actions(env, n):
    return env if n == 1 else HeldActionEnvironment(env, n)


@dataclass
class LayerSpec:
    reward: str
    config: TrainerConfig
    env: object = None  # optional training env override (e.g. wall-free pretraining)


@dataclass
class LayerStack:
    layers: list = field(default_factory=list)
    priors: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    latent_modes: list = field(default_factory=list)
    holds: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    hashes: list = field(default_factory=list)

    def __len__(self):
        return len(self.layers)

    def check(self):
        if not self.layers:
            raise ValueError("layer stack is empty")
        obs = self.layers[0].obs_dim
        for i, f in enumerate(self.layers):
            if f.obs_dim != obs:
                raise ValueError(f"layer {i} observes {f.obs_dim} dims, layer 0 observes {obs}")
            if i and f.action_dim != self.layers[i - 1].action_dim:
                raise ValueError(f"layer {i} action dim {f.action_dim} != latent dim "
                                 f"{self.layers[i - 1].action_dim} of layer {i - 1}")


def build_embedded(env, stack, upto=None, top_hold=1):
    """Embed layers ``0..upto-1`` of ``stack`` into ``env``.

    The hold of embedding ``i`` is the hold requested by layer ``i + 1``;
    ``top_hold`` applies to the topmost embedding (the action of the layer
    about to be trained).
    """
    upto = len(stack.layers) if upto is None else upto
    if upto == 0:
        return hold_actions(env, top_hold)
    cur = hold_actions(env, stack.holds[0])
    for i in range(upto):
        hold = top_hold if i == upto - 1 else stack.holds[i + 1]
        cur = EmbeddedEnvironment(cur, stack.layers[i], hold)
    return cur


def layer_config(i, config):
    if i >= 1 and config.action_prior != "gaussian":
        log.info("layer %d: switching action prior to gaussian", i)
        config = dataclasses.replace(config, action_prior="gaussian")
    return config


def new_layer_policy(env_spec, config, index):
    rng = make_rng([int(config.seed), 7, index])
    return FlowPolicy(env_spec.observation_dim, env_spec.action_dim, rng,
                      n_coupling=config.n_coupling, embed_hidden=config.hidden_units,
                      name=f"layer{index}")


def action_hold(config):
    """Environment steps each action of a layer is kept for."""
    return int(config.hold_n)


def sampling_mode(config):
    """How the layer draws its own latent once the hold lives in the environment."""
    return "per_step" if config.latent_mode == "hold_n" else config.latent_mode


def train_layerwise(env, layer_specs, stack=None, callback=None):
    """Train layers bottom-up; returns the extended :class:`LayerStack`.

    ``layer_specs`` lists one :class:`LayerSpec` per new layer. Passing an
    existing ``stack`` resumes by adding layers on top of it.
    """
    stack = LayerStack() if stack is None else stack
    for spec in layer_specs:
        i = len(stack.layers)
        cfg = layer_config(i, spec.config)
        hold = action_hold(cfg)
        base = spec.env if spec.env is not None else env
        train_env = build_embedded(base, stack, top_hold=hold)
        # the hold is realised by the environment, so the trainer never repeats actions
        tcfg = dataclasses.replace(cfg, latent_mode=sampling_mode(cfg), hold_n=1)
        policy = new_layer_policy(train_env.spec, tcfg, i)
        before = [params_hash(f) for f in stack.layers]

        def cb(row, trainer, _i=i):
            if callback is not None:
                callback(_i, row, trainer)

        try:
            policy, rows, _ = train(train_env, policy, tcfg, reward_channel=spec.reward, callback=cb)
        except Exception as exc:  # noqa: BLE001 - re-raised with the layer index
            raise LayerTrainingError(i, exc) from exc
        if [params_hash(f) for f in stack.layers] != before:
            raise RuntimeError(f"frozen layer parameters changed while training layer {i}")
        frozen = freeze(policy)
        stack.layers.append(frozen)
        stack.priors.append(cfg.action_prior)
        stack.rewards.append(spec.reward)
        stack.latent_modes.append(tcfg.latent_mode)
        stack.holds.append(hold)
        stack.metrics.append(rows)
        stack.hashes.append(params_hash(frozen))
    stack.check()
    return stack


class ComposedPolicy:
    """``f_0 o f_1 o ... o f_{K-1}`` viewed as one bijective policy."""

    def __init__(self, layers):
        if not layers:
            raise ValueError("cannot compose an empty stack")
        for i in range(1, len(layers)):
            if layers[i].action_dim != layers[i - 1].action_dim or \
                    layers[i].obs_dim != layers[0].obs_dim:
                raise ValueError(f"layer {i} is dimensionally inconsistent with layer {i - 1}")
        self.layers = list(layers)
        self.obs_dim = layers[0].obs_dim
        self.action_dim = layers[0].action_dim
        self.prior = layers[-1].prior

    def forward(self, h, obs):
        x, total = h, 0.0
        for f in reversed(self.layers):
            x, ld = f.forward(x, obs)
            total = total + ld
        return x, total

    def forward_trace(self, h, obs):
        """Intermediate latents top to bottom plus per-layer log-dets."""
        xs, lds = [np.asarray(h, dtype=np.float64)], []
        for f in reversed(self.layers):
            x, ld = f.forward(xs[-1], obs)
            xs.append(x)
            lds.append(ld)
        return xs, lds

    def inverse(self, a, obs):
        x, total = a, 0.0
        for f in self.layers:
            x, ld = f.inverse(x, obs)
            total = total + ld
        return x, total

    def log_prob(self, a, obs):
        h, inv_ld = self.inverse(a, obs)
        return self.prior.log_density(h) + inv_ld

    def sample(self, obs, rng, h=None):
        if h is None:
            obs_arr = np.asarray(obs, dtype=np.float64)
            h = self.prior.sample(rng, None if obs_arr.ndim == 1 else obs_arr.shape[0])
        a, ld = self.forward(h, obs)
        return a, self.prior.log_density(h) - ld, h

    def params(self):
        return [p for f in self.layers for p in f.params()]


def compose(stack):
    layers = stack.layers if isinstance(stack, LayerStack) else list(stack)
    if isinstance(stack, LayerStack):
        stack.check()
    if len(layers) == 1:
        return layers[0]
    return ComposedPolicy(layers)


def top_environment(env, stack):
    """Environment seen by the top layer of a trained stack (with its hold)."""
    return build_embedded(env, stack, upto=len(stack.layers) - 1, top_hold=stack.holds[-1])

