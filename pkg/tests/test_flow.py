import numpy as np
import pytest

from latentstack import autodiff as ad
from latentstack import oracle
from latentstack.flow import FlowPolicy, GaussianPrior


def perturbed(obs_dim, action_dim, seed, scale=0.3, hidden=16):
    rng = ad.make_rng(seed)
    pol = FlowPolicy(obs_dim, action_dim, rng, embed_hidden=hidden)
    for p in pol.params():
        p.data[...] += scale * rng.standard_normal(p.data.shape)
    return pol


def test_zero_initialised_flow_is_identity():
    rng = ad.make_rng(0)
    pol = FlowPolicy(5, 3, rng)
    h, s = rng.standard_normal((7, 3)), rng.standard_normal((7, 5))
    a, ld = pol.forward(h, s)
    np.testing.assert_array_equal(a, h)
    np.testing.assert_array_equal(ld, np.zeros(7))


@pytest.mark.parametrize("dim", [1, 2, 3, 6])
def test_round_trip(dim):
    pol = perturbed(4, dim, seed=dim)
    rng = ad.make_rng(10 + dim)
    h, s = rng.standard_normal((100, dim)), rng.standard_normal((100, 4))
    a, ld = pol.forward(h, s)
    back, inv_ld = pol.inverse(a, s)
    assert np.max(np.abs(back - h)) < 1e-9
    np.testing.assert_allclose(ld, -inv_ld, atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_log_det_matches_numeric_jacobian(dim):
    pol = perturbed(3, dim, seed=20 + dim)
    rng = ad.make_rng(dim)
    for _ in range(5):
        h, s = rng.standard_normal(dim), rng.standard_normal(3)
        _, ld = pol.forward(h, s)
        jac = oracle.numeric_jacobian(lambda z, o: pol.forward(z, o)[0], h, s)
        assert abs(ld - oracle.log_abs_det(jac)) <= 1e-4 * max(1.0, abs(ld))


def test_jacobian_is_triangular_per_coupling():
    pol = perturbed(2, 4, seed=3)
    obs = np.ones(2)
    layer = pol.layers[0]
    emb = pol.embed(ad.Tensor(obs[None, :]))

    def f(x):
        y, _ = layer.forward(ad.Tensor(x[None, :]), emb)
        return y.data[0]

    jac = oracle.numeric_jacobian(f, np.arange(4.0) / 4)
    pass_idx = np.flatnonzero(layer.mask)
    np.testing.assert_allclose(jac[np.ix_(pass_idx, pass_idx)], np.eye(len(pass_idx)), atol=1e-8)
    move = np.flatnonzero(layer.mask == 0)
    np.testing.assert_allclose(jac[np.ix_(pass_idx, move)], 0.0, atol=1e-8)


def test_masks_alternate():
    pol = FlowPolicy(2, 4, ad.make_rng(0))
    m0, m1 = pol.masks()
    np.testing.assert_array_equal(m0, [1, 0, 1, 0])
    np.testing.assert_array_equal(m1, 1 - m0)


def test_log_prob_consistent_with_sample():
    pol = perturbed(3, 2, seed=4)
    rng = ad.make_rng(5)
    obs = rng.standard_normal((50, 3))
    a, logp, h = pol.sample(obs, rng)
    np.testing.assert_allclose(pol.log_prob(a, obs), logp, atol=1e-10)
    np.testing.assert_allclose(pol.inverse(a, obs)[0], h, atol=1e-10)


@pytest.mark.parametrize("scale", [0.0, 0.05])
def test_density_normalises_2d(scale):
    pol = perturbed(2, 2, seed=7, scale=scale)
    mass = oracle.grid_integrate_density(pol, np.array([0.3, -0.2]), resolution=300)
    assert abs(mass - 1.0) < 0.02


def test_density_normalises_1d():
    pol = perturbed(2, 1, seed=8, scale=0.1)
    mass = oracle.grid_integrate_density(pol, np.array([0.3, -0.2]), bounds=(-10, 10),
                                         resolution=4000)
    assert abs(mass - 1.0) < 1e-3


def test_tape_and_array_paths_agree():
    pol = perturbed(3, 2, seed=9)
    rng = ad.make_rng(1)
    h, s = rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
    with ad.Tape():
        a_t, ld_t = pol.forward_t(ad.Tensor(h), ad.Tensor(s))
        lp_t = pol.log_prob_t(ad.Tensor(a_t.data), ad.Tensor(s))
    a, ld = pol.forward(h, s)
    np.testing.assert_array_equal(a_t.data, a)
    np.testing.assert_array_equal(ld_t.data, ld)
    np.testing.assert_allclose(lp_t.data, pol.log_prob(a, s), atol=1e-12)


def test_single_vector_inputs():
    pol = perturbed(3, 2, seed=10)
    a, ld = pol.forward(np.zeros(2), np.zeros(3))
    assert a.shape == (2,) and isinstance(ld, float)


def test_input_validation():
    pol = FlowPolicy(3, 2, ad.make_rng(0))
    with pytest.raises(ValueError, match="dimension 2"):
        pol.forward(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError, match="dimension 3"):
        pol.forward(np.zeros(2), np.zeros(4))
    with pytest.raises(ValueError, match="non-finite"):
        pol.forward(np.array([np.nan, 0.0]), np.zeros(3))
    with pytest.raises(ValueError):
        FlowPolicy(0, 2, ad.make_rng(0))


def test_gaussian_prior_entropy():
    prior = GaussianPrior(3)
    x = prior.sample(ad.make_rng(0), 200_000)
    assert abs(-np.mean(prior.log_density(x)) - prior.entropy()) < 0.01


def test_topology_fields():
    pol = FlowPolicy(6, 2, ad.make_rng(0))
    topo = pol.topology()
    assert topo["obs_dim"] == 6 and topo["action_dim"] == 2 and topo["n_coupling"] == 2
    sizes = pol.embedder.sizes
    assert sizes == (6, 128, 128, 4)
