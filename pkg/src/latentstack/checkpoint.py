"""JSON checkpoints of flow policies and layer stacks.

Floats are written with ``repr`` precision (``json`` default), which
round-trips float64 exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .autodiff import make_rng
from .flow import FlowPolicy
from .hierarchy import LayerStack, freeze, params_hash

LAYER_FORMAT = "latentstack.layer"
STACK_FORMAT = "latentstack.stack"
VERSION = 1


class CheckpointError(ValueError):
    pass


def policy_to_dict(policy, metadata=None):
    return {
        "format": LAYER_FORMAT,
        "version": VERSION,
        "topology": policy.topology(),
        "masks": [m.tolist() for m in policy.masks()],
        "params_sha256": params_hash(policy),
        "metadata": dict(metadata or {}),
        "params": {name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
                   for name, p in policy.named_params().items()},
    }


def _field(doc, key, where):
    if not isinstance(doc, dict) or key not in doc:
        raise CheckpointError(f"checkpoint is missing field {where}{key!r}")
    return doc[key]


def policy_from_dict(doc, expected_obs_dim=None, expected_action_dim=None, where=""):
    fmt = _field(doc, "format", where)
    if fmt != LAYER_FORMAT:
        raise CheckpointError(f"field {where}'format' is {fmt!r}, expected {LAYER_FORMAT!r}")
    topo = _field(doc, "topology", where)
    tw = f"{where}topology."
    try:
        obs_dim = int(_field(topo, "obs_dim", tw))
        action_dim = int(_field(topo, "action_dim", tw))
        n_coupling = int(_field(topo, "n_coupling", tw))
        embed_hidden = int(_field(topo, "embed_hidden", tw))
        name = str(_field(topo, "name", tw))
        scale_bound = float(topo.get("scale_bound", 5.0))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed field {tw}: {exc}") from None
    if expected_action_dim is not None and action_dim != expected_action_dim:
        raise CheckpointError(f"checkpoint action_dim {action_dim} does not match "
                              f"expected {expected_action_dim}")
    if expected_obs_dim is not None and obs_dim != expected_obs_dim:
        raise CheckpointError(f"checkpoint obs_dim {obs_dim} does not match "
                              f"expected {expected_obs_dim}")
    policy = FlowPolicy(obs_dim, action_dim, make_rng(0), n_coupling=n_coupling,
                        embed_hidden=embed_hidden, name=name, scale_bound=scale_bound)
    masks = _field(doc, "masks", where)
    if [list(map(float, m)) for m in masks] != [m.tolist() for m in policy.masks()]:
        raise CheckpointError(f"field {where}'masks' disagrees with the rebuilt topology")
    params = _field(doc, "params", where)
    for pname, p in policy.named_params().items():
        entry = _field(params, pname, f"{where}params.")
        shape = tuple(_field(entry, "shape", f"{where}params.{pname}."))
        data = _field(entry, "data", f"{where}params.{pname}.")
        if shape != p.data.shape or len(data) != p.data.size:
            raise CheckpointError(f"field {where}params.{pname!r} has shape {shape}, "
                                  f"expected {p.data.shape}")
        p.data[...] = np.asarray(data, dtype=np.float64).reshape(shape)
    extra = set(params) - set(policy.named_params())
    if extra:
        raise CheckpointError(f"field {where}'params' has unexpected entries {sorted(extra)}")
    digest = doc.get("params_sha256")
    if digest is not None and digest != params_hash(policy):
        raise CheckpointError(f"field {where}'params_sha256' does not match the loaded parameters")
    return policy, dict(doc.get("metadata", {}))


def stack_to_dict(stack, metadata=None):
    layers = []
    for i, f in enumerate(stack.layers):
        meta = {"index": i, "prior": stack.priors[i], "reward": stack.rewards[i],
                "latent_mode": stack.latent_modes[i], "hold": stack.holds[i]}
        layers.append(policy_to_dict(f, meta))
    return {"format": STACK_FORMAT, "version": VERSION, "metadata": dict(metadata or {}),
            "layers": layers}


def stack_from_dict(doc, expected_obs_dim=None, expected_action_dim=None):
    layers = _field(doc, "layers", "")
    if not isinstance(layers, list) or not layers:
        raise CheckpointError("field 'layers' must be a non-empty list")
    stack = LayerStack()
    for i, layer in enumerate(layers):
        where = f"layers[{i}]."
        policy, meta = policy_from_dict(layer, expected_obs_dim,
                                        expected_action_dim if i == 0 else None, where)
        frozen = freeze(policy)
        stack.layers.append(frozen)
        stack.priors.append(str(_field(meta, "prior", where + "metadata.")))
        stack.rewards.append(str(_field(meta, "reward", where + "metadata.")))
        stack.latent_modes.append(str(_field(meta, "latent_mode", where + "metadata.")))
        stack.holds.append(int(_field(meta, "hold", where + "metadata.")))
        stack.metrics.append([])
        stack.hashes.append(params_hash(frozen))
    try:
        stack.check()
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return stack, dict(doc.get("metadata", {}))


def _write(path, doc):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, allow_nan=False)
    os.replace(tmp, path)


def save_checkpoint(path, obj, metadata=None):
    """Write a :class:`FlowPolicy` or :class:`LayerStack` to ``path``."""
    doc = stack_to_dict(obj, metadata) if isinstance(obj, LayerStack) else policy_to_dict(obj, metadata)
    _write(path, doc)
    return path


def read_document(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is not valid JSON: {exc}") from None


def load_checkpoint(path, expected_obs_dim=None, expected_action_dim=None):
    """Load a checkpoint; returns ``(policy_or_stack, metadata)``.

    A layer checkpoint gives a trainable :class:`FlowPolicy`; a stack
    checkpoint gives a :class:`LayerStack` of frozen layers.
    """
    doc = read_document(path)
    fmt = _field(doc, "format", "")
    if fmt == STACK_FORMAT:
        return stack_from_dict(doc, expected_obs_dim, expected_action_dim)
    return policy_from_dict(doc, expected_obs_dim, expected_action_dim)


def as_stack(obj, metadata):
    """Wrap a single loaded layer as a one-layer stack."""
    if isinstance(obj, LayerStack):
        return obj
    stack = LayerStack()
    frozen = freeze(obj)
    stack.layers.append(frozen)
    stack.priors.append(metadata.get("prior", "uniform"))
    stack.rewards.append(metadata.get("reward", ""))
    stack.latent_modes.append(metadata.get("latent_mode", "per_step"))
    stack.holds.append(int(metadata.get("hold", 1)))
    stack.metrics.append([])
    stack.hashes.append(params_hash(frozen))
    return stack
