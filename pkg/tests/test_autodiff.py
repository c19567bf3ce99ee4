import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentstack import autodiff as ad
from latentstack.autodiff import MLP, Adam, AdamState, ShapeError, Tensor, adam_step
from latentstack.oracle import finite_difference_grad

from helpers import gradcheck, relative_error


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "square": ad.square,
    "neg": ad.neg,
    "scale": lambda a: ad.scale(a, -2.5),
    "relu": ad.relu,
    "clip": lambda a: ad.clip(a, -0.7, 0.9),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = ad.make_rng(1)
    x = leaf(rng, 4, 3)
    # keep away from kinks so central differences are valid
    x.data[np.abs(x.data) < 1e-3] += 0.1
    for k in (-0.7, 0.9):
        x.data[np.abs(x.data - k) < 1e-3] += 0.05
    w = rng.standard_normal((4, 3))
    err = gradcheck(lambda: ad.sum(ad.mul(UNARY[name](x), Tensor(w))), [x])
    assert err < 1e-6


def test_log_gradient_and_domain():
    rng = ad.make_rng(2)
    x = leaf(rng, 5, positive=True)
    assert gradcheck(lambda: ad.sum(ad.log(x)), [x]) < 1e-6
    with pytest.raises(ValueError, match="positive"):
        ad.log(Tensor([1.0, -1.0]))


def test_broadcasting_binary_ops():
    rng = ad.make_rng(3)
    a, b = leaf(rng, 4, 3), leaf(rng, 3)
    for op in (ad.add, ad.sub, ad.mul):
        assert gradcheck(lambda: ad.sum(ad.square(op(a, b))), [a, b]) < 1e-6


def test_matmul_concat_take_mean():
    rng = ad.make_rng(4)
    a, b, c = leaf(rng, 5, 3), leaf(rng, 3, 2), leaf(rng, 5, 4)

    def build():
        y = ad.concat([ad.matmul(a, b), c])
        return ad.mean(ad.square(ad.take(y, np.array([0, 2, 2, 5]))))

    assert gradcheck(build, [a, b, c]) < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.square(x)
    with pytest.raises(ShapeError):
        ad.backward(y)


def test_param_off_path_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape():
        loss = ad.sum(ad.square(x))
    g = ad.grad(loss, [x, unused])
    np.testing.assert_array_equal(g[0], 2 * np.ones(3))
    np.testing.assert_array_equal(g[1], np.zeros(2))


def test_no_recording_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.square(x)
    assert y._node is None


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_mlp_gradients_random_shapes(batch, width, seed):
    rng = ad.make_rng(seed)
    net = MLP([3, width, 2], rng)
    x = rng.standard_normal((batch, 3))
    err = gradcheck(lambda: ad.mean(ad.tanh(net(x))), net.params())
    assert err < 1e-4


def test_finite_difference_oracle_on_quadratic():
    a = np.array([1.0, -2.0, 0.5])
    g = finite_difference_grad(lambda: float(np.sum(a ** 2)), [a])[0]
    np.testing.assert_allclose(g, 2 * a, rtol=1e-8)


def test_adam_matches_reference_formula():
    rng = ad.make_rng(5)
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    x0 = p.data.copy()
    state = AdamState.for_params([p], learning_rate=0.1)
    m = v = np.zeros(4)
    x = x0.copy()
    for t in range(1, 4):
        g = rng.standard_normal(4)
        adam_step([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p], lr=0.01)
    opt.step([np.array([3.0, -0.2, 1e-3])])
    np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=1e-4)


def test_polyak():
    rng = ad.make_rng(6)
    live, tgt = MLP([2, 3, 1], rng).params(), MLP([2, 3, 1], rng).params()
    before = [t.data.copy() for t in tgt]
    ad.polyak(live, tgt, 0.25)
    for l, t, b in zip(live, tgt, before):
        np.testing.assert_allclose(t.data, 0.25 * l.data + 0.75 * b)
    ad.polyak(live, tgt, 1.0)
    for l, t in zip(live, tgt):
        np.testing.assert_array_equal(t.data, l.data)
    with pytest.raises(ValueError):
        ad.polyak(live, tgt, 0.0)


def test_split_rng_is_deterministic_and_independent():
    a = [g.standard_normal(3) for g in ad.split_rng(ad.make_rng(9), 3)]
    b = [g.standard_normal(3) for g in ad.split_rng(ad.make_rng(9), 3)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert relative_error(a[0], a[1]) > 0.1
