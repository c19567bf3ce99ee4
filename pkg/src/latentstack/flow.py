"""Observation-conditioned real-NVP style policies.

An action is produced as ``a = f(h; s)`` with ``h`` drawn from a unit
Gaussian. ``f`` is a stack of affine coupling layers whose scale and
translation networks see the untouched half of the latent together with an
embedding of the observation, so ``f`` is bijective in ``h`` for every
``s`` while depending on ``s`` arbitrarily.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor

LOG_2PI = math.log(2.0 * math.pi)
SCALE_BOUND = 5.0


class GaussianPrior:
    """Spherical unit Gaussian over the latent."""

    kind = "gaussian"

    def __init__(self, dim):
        self.dim = int(dim)

    def log_density(self, h):
        h = np.asarray(h, dtype=np.float64)
        return -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(h * h, axis=-1)

    def log_density_t(self, h):
        """Tape-aware variant of :meth:`log_density` for a batch tensor."""
        return ad.scale(ad.sum(ad.square(h), axis=-1), -0.5) - 0.5 * self.dim * LOG_2PI

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.standard_normal(shape)

    def entropy(self):
        return 0.5 * self.dim * (1.0 + LOG_2PI)


def _as_batch(x, dim, what):
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have trailing dimension {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x, single


class CouplingLayer:
    """Affine coupling: the ``pass_idx`` coordinates condition the rest."""

    def __init__(self, dim, emb_dim, pass_idx, rng, name, scale_bound=SCALE_BOUND):
        self.dim = dim
        self.pass_idx = np.asarray(sorted(pass_idx), dtype=np.int64)
        self.move_idx = np.asarray([i for i in range(dim) if i not in set(pass_idx)], dtype=np.int64)
        if dim >= 2 and (len(self.pass_idx) == 0 or len(self.move_idx) == 0):
            raise ValueError("coupling mask must contain both halves")
        self.mask = np.zeros(dim)
        self.mask[self.pass_idx] = 1.0
        self._unperm = np.argsort(np.concatenate([self.pass_idx, self.move_idx]))
        n_in = len(self.pass_idx) + emb_dim
        n_out = len(self.move_idx)
        self.scale_net = MLP([n_in, dim, n_out], rng, name=f"{name}.scale", zero_last=True)
        self.translation_net = MLP([n_in, dim, n_out], rng, name=f"{name}.translation",
                                   zero_last=True)
        self.scale_bound = scale_bound

    def _st(self, x_pass, emb):
        inp = ad.concat([x_pass, emb])
        s = ad.scale(ad.tanh(self.scale_net(inp)), self.scale_bound)
        return s, self.translation_net(inp)

    def _merge(self, x_pass, x_move):
        return ad.take(ad.concat([x_pass, x_move]), self._unperm)

    def forward(self, x, emb):
        x_pass = ad.take(x, self.pass_idx)
        s, t = self._st(x_pass, emb)
        y_move = ad.take(x, self.move_idx) * ad.exp(s) + t
        return self._merge(x_pass, y_move), ad.sum(s, axis=-1)

    def inverse(self, y, emb):
        y_pass = ad.take(y, self.pass_idx)
        s, t = self._st(y_pass, emb)
        x_move = (ad.take(y, self.move_idx) - t) * ad.exp(-s)
        return self._merge(y_pass, x_move), -ad.sum(s, axis=-1)

    def params(self):
        return self.scale_net.params() + self.translation_net.params()


class ConditionalAffine:
    """One-dimensional fallback: ``a = h * exp(s(emb)) + t(emb)``."""

    def __init__(self, dim, emb_dim, rng, name, scale_bound=SCALE_BOUND):
        self.dim = dim
        self.mask = np.zeros(dim)
        self.scale_net = MLP([emb_dim, dim, dim], rng, name=f"{name}.scale", zero_last=True)
        self.translation_net = MLP([emb_dim, dim, dim], rng, name=f"{name}.translation",
                                   zero_last=True)
        self.scale_bound = scale_bound

    def _st(self, emb):
        s = ad.scale(ad.tanh(self.scale_net(emb)), self.scale_bound)
        return s, self.translation_net(emb)

    def forward(self, x, emb):
        s, t = self._st(emb)
        return x * ad.exp(s) + t, ad.sum(s, axis=-1)

    def inverse(self, y, emb):
        s, t = self._st(emb)
        return (y - t) * ad.exp(-s), -ad.sum(s, axis=-1)

    def params(self):
        return self.scale_net.params() + self.translation_net.params()


class FlowPolicy:
    """Bijective latent-to-action policy conditioned on the observation.

    Parameters
    ----------
    obs_dim, action_dim : int
        Observation width and action (= latent) width.
    rng : numpy Generator used for weight initialisation.
    n_coupling : int
        Number of coupling layers; masks alternate between layers.
    embed_hidden : int
        Width of the two hidden layers of the observation embedder.
    """

    def __init__(self, obs_dim, action_dim, rng, n_coupling=2, embed_hidden=128,
                 name="policy", scale_bound=SCALE_BOUND):
        if obs_dim < 1 or action_dim < 1:
            raise ValueError("obs_dim and action_dim must be positive")
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.n_coupling = int(n_coupling)
        self.embed_hidden = int(embed_hidden)
        self.name = name
        self.scale_bound = float(scale_bound)
        emb_dim = 2 * self.action_dim
        self.embedder = MLP([self.obs_dim, embed_hidden, embed_hidden, emb_dim], rng,
                            name=f"{name}.embed")
        self.layers = []
        for i in range(self.n_coupling):
            lname = f"{name}.coupling{i}"
            if self.action_dim == 1:
                layer = ConditionalAffine(1, emb_dim, rng, lname, scale_bound)
            else:
                parity = i % 2
                pass_idx = [j for j in range(self.action_dim) if j % 2 == parity]
                layer = CouplingLayer(self.action_dim, emb_dim, pass_idx, rng, lname, scale_bound)
            self.layers.append(layer)
        self.prior = GaussianPrior(self.action_dim)

    # -- tape-aware batch primitives ------------------------------------
    def embed(self, obs):
        return self.embedder(obs)

    def forward_t(self, h, obs, emb=None):
        """``(a, log_det)`` as tensors for batch inputs ``h`` [B, d], ``obs`` [B, o]."""
        emb = self.embed(obs) if emb is None else emb
        log_det = None
        x = h
        for layer in self.layers:
            x, ld = layer.forward(x, emb)
            log_det = ld if log_det is None else log_det + ld
        return x, log_det

    def inverse_t(self, a, obs, emb=None):
        emb = self.embed(obs) if emb is None else emb
        log_det = None
        x = a
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, emb)
            log_det = ld if log_det is None else log_det + ld
        return x, log_det

    def log_prob_t(self, a, obs):
        h, inv_log_det = self.inverse_t(a, obs)
        return self.prior.log_density_t(h) + inv_log_det

    # -- array-level interface -------------------------------------------
    def _inputs(self, x, obs, what):
        x, single = _as_batch(x, self.action_dim, what)
        obs, single_obs = _as_batch(obs, self.obs_dim, "observation")
        if obs.shape[0] != x.shape[0]:
            if obs.shape[0] == 1:
                obs = np.broadcast_to(obs, (x.shape[0], self.obs_dim))
            else:
                raise ValueError(f"batch sizes differ: {x.shape[0]} vs {obs.shape[0]}")
        return Tensor(x), Tensor(obs), single and single_obs

    def forward(self, h, obs):
        """Map latent(s) to action(s); returns ``(a, log_det)`` as arrays."""
        h_t, obs_t, single = self._inputs(h, obs, "latent")
        a, ld = self.forward_t(h_t, obs_t)
        return (a.data[0], float(ld.data[0])) if single else (a.data, ld.data)

    def inverse(self, a, obs):
        a_t, obs_t, single = self._inputs(a, obs, "action")
        h, ld = self.inverse_t(a_t, obs_t)
        return (h.data[0], float(ld.data[0])) if single else (h.data, ld.data)

    def log_prob(self, a, obs):
        h, inv_ld = self.inverse(a, obs)
        return self.prior.log_density(h) + inv_ld

    def sample(self, obs, rng, h=None):
        """Draw ``h`` from the prior (unless given) and push it through the flow."""
        if h is None:
            obs_arr = np.asarray(obs, dtype=np.float64)
            h = self.prior.sample(rng, None if obs_arr.ndim == 1 else obs_arr.shape[0])
        a, ld = self.forward(h, obs)
        return a, self.prior.log_density(h) - ld, h

    # -- parameters ------------------------------------------------------
    def params(self):
        out = self.embedder.params()
        for layer in self.layers:
            out += layer.params()
        return out

    def named_params(self):
        return {p.name: p for p in self.params()}

    def masks(self):
        return [layer.mask.copy() for layer in self.layers]

    def topology(self):
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "n_coupling": self.n_coupling, "embed_hidden": self.embed_hidden,
                "name": self.name, "scale_bound": self.scale_bound}
