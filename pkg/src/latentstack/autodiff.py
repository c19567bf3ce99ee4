"""Dense float64 tensors with a reverse-mode tape, small MLPs, and Adam.

Operations only record onto a tape when one is active (``with Tape():``)
and at least one input requires gradients. Outside a tape everything runs
as plain numpy, which is what rollouts use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_node")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return scale(self, 1.0 / other)

    def __getitem__(self, cols):
        return take(self, cols)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    backward: object  # callable: upstream grad -> tuple of input grads


class Tape:
    """Append-only record of operations for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def record(self, out, inputs, backward):
        node = Node(out, inputs, backward)
        out._node = (self, len(self.nodes))
        out.requires_grad = True
        self.nodes.append(node)
        return out


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, inputs, backward):
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0.0):
        raise ValueError(f"log of non-positive input (min {a.data.min():.6g})")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0.0
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient flows only where the input is inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), back)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def concat(tensors):
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ShapeError("concat: leading shapes differ: " + ", ".join(str(t.shape) for t in tensors))
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=-1)))


def take(a, cols):
    """Select columns of the last axis (integer index array or slice)."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        if isinstance(cols, slice):
            full[..., cols] = g
        else:
            np.add.at(full, (Ellipsis, cols), g)
        return (full,)

    return _result(a.data[..., cols], (a,), back)


def backward(loss, params=None):
    """Reverse pass from a scalar ``loss``.

    Returns ``{id(param): gradient ndarray}``. With ``params`` given, every
    listed parameter gets an entry (zeros when it is off the loss path);
    otherwise all leaf tensors reached are returned.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    if loss._node is not None:
        tape, start = loss._node
        grads[id(loss)] = np.ones_like(loss.data)
        leaves = set()
        for idx in range(start, -1, -1):
            node = tape.nodes[idx]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp._node is None:
                    leaves.add(key)
        grads = {k: v for k, v in grads.items() if k in leaves}
    if params is None:
        return grads
    return {id(p): grads.get(id(p), np.zeros_like(p.data)) for p in params}


def grad(loss, params):
    """Gradients of ``loss`` for ``params`` as a list, in order."""
    g = backward(loss, params)
    return [g[id(p)] for p in params]


# ---------------------------------------------------------------------------
# networks

class Linear:
    def __init__(self, n_in, n_out, rng, name="linear", zero=False):
        if zero:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(b, requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


class MLP:
    """Fully connected ReLU network; ``zero_last`` zeroes the output layer."""

    def __init__(self, sizes, rng, name="mlp", zero_last=False):
        self.sizes = tuple(int(s) for s in sizes)
        n = len(self.sizes) - 1
        self.layers = [
            Linear(self.sizes[i], self.sizes[i + 1], rng, name=f"{name}.{i}",
                   zero=zero_last and i == n - 1)
            for i in range(n)
        ]

    def __call__(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"network expects input width {self.sizes[0]}, got shape {x.shape}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


def forward_numpy(mlp, x):
    """Tape-free evaluation of an MLP on a raw array."""
    for i, layer in enumerate(mlp.layers):
        x = x @ layer.weight.data + layer.bias.data
        if i < len(mlp.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def copy_params(src, dst):
    for s, d in zip(src, dst):
        if s.shape != d.shape:
            raise ShapeError(f"parameter shapes differ: {s.shape} vs {d.shape}")
        d.data = s.data.copy()


def polyak(live, target, tau):
    """target <- tau * live + (1 - tau) * target, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    for s, d in zip(live, target):
        if tau == 1.0:
            d.data = s.data.copy()
        else:
            d.data = tau * s.data + (1.0 - tau) * d.data


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, learning_rate=lr, beta1=beta1,
                                          beta2=beta2, epsilon=epsilon)

    def step(self, grads):
        adam_step(self.params, grads, self.state)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng, n):
    """Derive ``n`` independent child generators from ``rng``."""
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [make_rng(int(s)) for s in seeds]
