import math

import numpy as np
import pytest

from sgdlab import datagen, genbound, netcore
from sgdlab.errors import InputError


# ---------------------------------------------------------------------------
# posterior construction


def test_posterior_keeps_prior_on_flat_directions(rng):
    p = 8
    prior = genbound.PriorSpec(theta0=np.zeros(p), sigmas=np.full(p, 2.0))
    hess_diag = np.full(p, 0.01)  # all below prior precision 0.25
    post = genbound.build_posterior(hess_diag, prior, rng.standard_normal(p))
    np.testing.assert_array_equal(post.nus, np.full(p, 0.25))
    # trace and log terms of the KL vanish when the covariances coincide
    kl = genbound.kl_gaussians(post, genbound.PriorSpec(post.theta,
                                                        prior.sigmas))
    assert kl == pytest.approx(0.0, abs=1e-12)


def test_posterior_isotropic_rule(rng):
    p = 6
    prior = genbound.PriorSpec(theta0=np.zeros(p), sigmas=np.ones(p))
    diag = rng.standard_normal(p)
    post = genbound.build_posterior(diag, prior, np.zeros(p))
    np.testing.assert_array_equal(post.nus, np.maximum(diag, 1.0))


def test_posterior_elementwise_max(rng):
    p = 30
    prior = genbound.PriorSpec(theta0=rng.standard_normal(p),
                               sigmas=rng.uniform(0.5, 2.0, p))
    diag = rng.standard_normal(p) * 3
    post = genbound.build_posterior(diag, prior, rng.standard_normal(p))
    for j in range(p):
        assert post.nus[j] == max(diag[j], 1.0 / prior.sigmas[j] ** 2)
        assert post.nus[j] >= 1.0 / prior.sigmas[j] ** 2
        assert post.nus[j] >= diag[j]


# ---------------------------------------------------------------------------
# Gaussian KL


def test_kl_identical_distributions_is_zero(rng):
    p = 5
    prior = genbound.PriorSpec(theta0=rng.standard_normal(p),
                               sigmas=rng.uniform(0.5, 1.5, p))
    post = genbound.PosteriorSpec(theta=prior.theta0.copy(),
                                  nus=1.0 / prior.sigmas ** 2)
    assert genbound.kl_gaussians(post, prior) == pytest.approx(0.0, abs=1e-12)


def test_kl_unit_shift_closed_form():
    prior = genbound.PriorSpec(theta0=np.zeros(1), sigmas=np.ones(1))
    post = genbound.PosteriorSpec(theta=np.ones(1), nus=np.ones(1))
    assert genbound.kl_gaussians(post, prior) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_monte_carlo(rng):
    p = 5
    prior = genbound.PriorSpec(theta0=rng.standard_normal(p),
                               sigmas=rng.uniform(0.7, 1.8, p))
    nus = rng.uniform(0.4, 4.0, p)
    post = genbound.PosteriorSpec(theta=rng.standard_normal(p), nus=nus)
    exact = genbound.kl_gaussians(post, prior)

    draws = 10 ** 6
    x = post.theta + rng.standard_normal((draws, p)) / np.sqrt(nus)
    logq = -0.5 * np.sum((x - post.theta) ** 2 * nus, axis=1) \
        + 0.5 * np.sum(np.log(nus))
    logp = -0.5 * np.sum((x - prior.theta0) ** 2 / prior.sigmas ** 2, axis=1) \
        - np.sum(np.log(prior.sigmas))
    sample = logq - logp
    se = sample.std(ddof=1) / math.sqrt(draws)
    assert abs(sample.mean() - exact) <= 3.0 * se


def test_kl_rejects_nonpositive_precision():
    prior = genbound.PriorSpec(theta0=np.zeros(2), sigmas=np.ones(2))
    with pytest.raises(InputError):
        genbound.kl_gaussians(genbound.PosteriorSpec(np.zeros(2),
                                                     np.array([1.0, 0.0])), prior)


# ---------------------------------------------------------------------------
# binary relative entropy and inversion


def test_kl_bernoulli_basics():
    assert genbound.kl_bernoulli(0.3, 0.3) == 0.0
    assert genbound.kl_bernoulli(0.0, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert genbound.kl_bernoulli(0.0, 1.0) == math.inf
    with pytest.raises(InputError):
        genbound.kl_bernoulli(-0.1, 0.5)


def test_kl_bernoulli_convex_in_q():
    qs = np.linspace(0.05, 0.95, 61)
    vals = np.array([genbound.kl_bernoulli(0.3, q) for q in qs])
    second = vals[2:] - 2 * vals[1:-1] + vals[:-2]
    assert (second >= -1e-12).all()


def test_kl_inversion_roundtrip():
    for p_hat in (0.0, 0.05, 0.3):
        for budget in (1e-4, 0.01, 0.2):
            x, vac = genbound.kl_inv_upper(p_hat, budget)
            assert not vac
            assert genbound.kl_bernoulli(p_hat, x) == pytest.approx(budget, abs=1e-8)
            assert x >= p_hat


def test_kl_inversion_monotone_and_vacuous():
    xs = [genbound.kl_inv_upper(0.1, b)[0] for b in (0.001, 0.01, 0.1, 1.0)]
    assert all(b >= a for a, b in zip(xs, xs[1:]))
    x, vac = genbound.kl_inv_upper(0.1, 1000.0)
    assert vac and x == 1.0


# ---------------------------------------------------------------------------
# layer rescaling


def test_alpha_transform_identity(tiny_spec, rng):
    pv = netcore.random_params(tiny_spec, rng)
    tr = genbound.AlphaTransform(alphas=np.ones(tiny_spec.num_layers))
    out = genbound.alpha_transform(pv, tr)
    np.testing.assert_array_equal(out.values, pv.values)


def test_alpha_transform_validation():
    with pytest.raises(InputError):
        genbound.AlphaTransform(alphas=np.array([2.0, 1.0]))
    with pytest.raises(InputError):
        genbound.AlphaTransform(alphas=np.array([-1.0, -1.0]))


def test_cumulative_mode_preserves_network_outputs(tiny_spec, tiny_data, rng):
    pv = netcore.random_params(tiny_spec, rng)
    logits0 = netcore.forward_loss(tiny_spec, pv.values, tiny_data.features,
                                   tiny_data.labels).logits
    for _ in range(5):
        tr = genbound.random_alpha(tiny_spec.num_layers, rng)
        pv2 = genbound.alpha_transform(pv, tr)
        logits1 = netcore.forward_loss(tiny_spec, pv2.values, tiny_data.features,
                                       tiny_data.labels).logits
        assert np.abs(logits0 - logits1).max() <= 1e-9 * (1 + np.abs(logits0).max())


def test_flat_mode_changes_network_outputs(tiny_spec, tiny_data, rng):
    pv = netcore.random_params(tiny_spec, rng)
    logits0 = netcore.forward_loss(tiny_spec, pv.values, tiny_data.features,
                                   tiny_data.labels).logits
    tr = genbound.random_alpha(tiny_spec.num_layers, rng, bias_mode="flat")
    pv2 = genbound.alpha_transform(pv, tr)
    logits1 = netcore.forward_loss(tiny_spec, pv2.values, tiny_data.features,
                                   tiny_data.labels).logits
    assert np.abs(logits0 - logits1).max() > 1e-6


def test_hessian_transforms_by_induced_scaling(tiny_spec, tiny_data, rng):
    pv = netcore.random_params(tiny_spec, rng)
    H = netcore.dense_hessian(tiny_spec, pv.values, tiny_data.features,
                              tiny_data.labels).dense
    tr = genbound.random_alpha(tiny_spec.num_layers, rng)
    s = genbound.param_scale_vector(pv.layout, tr)
    pv2 = genbound.alpha_transform(pv, tr)
    H2 = netcore.dense_hessian(tiny_spec, pv2.values, tiny_data.features,
                               tiny_data.labels).dense
    expected = H / np.outer(s, s)
    assert np.abs(H2 - expected).max() <= 1e-8 * (1.0 + np.abs(expected).max())


def test_kl_invariant_under_any_diagonal_reparameterization(rng):
    # push prior and posterior through the same invertible diagonal map
    p = 12
    prior = genbound.PriorSpec(theta0=rng.standard_normal(p),
                               sigmas=rng.uniform(0.5, 2.0, p))
    post = genbound.PosteriorSpec(theta=rng.standard_normal(p),
                                  nus=rng.uniform(0.3, 3.0, p))
    kl0 = genbound.kl_gaussians(post, prior)
    for _ in range(10):
        s = rng.uniform(0.2, 5.0, p) * rng.choice([-1.0, 1.0], p)
        prior2 = genbound.PriorSpec(theta0=prior.theta0 * s,
                                    sigmas=prior.sigmas * np.abs(s))
        post2 = genbound.PosteriorSpec(theta=post.theta * s, nus=post.nus / s ** 2)
        kl1 = genbound.kl_gaussians(post2, prior2)
        assert abs(kl0 - kl1) <= 1e-9 * (1.0 + abs(kl0))


# ---------------------------------------------------------------------------
# bound report


def test_bound_terms_at_initialization_with_flat_hessian():
    p, n = 10, 50
    prior = genbound.PriorSpec(theta0=np.ones(p), sigmas=np.ones(p))
    _, eff_dim, eff_curv, wfrob, conf, kl_rhs, _ = genbound.bound_terms(
        np.zeros(p), prior, np.ones(p), n, 0.05)
    assert eff_dim == 0 and eff_curv == 0.0 and wfrob == 0.0
    assert kl_rhs == pytest.approx(conf)
    assert conf == pytest.approx(math.log((n + 1) / 0.05) / n)


def test_kl_rhs_dominates_exact_kl(tiny_spec, tiny_data, rng):
    # the bound drops a nonpositive trace slack, so rhs >= exact KL part
    pv = netcore.random_params(tiny_spec, rng)
    prior = genbound.PriorSpec(theta0=rng.standard_normal(pv.size) * 0.2,
                               sigmas=np.full(pv.size, 1.0))
    diag = netcore.hessian_diagonal(tiny_spec, pv.values, tiny_data.features,
                                    tiny_data.labels)
    _, _, _, _, _, kl_rhs, kl_exact = genbound.bound_terms(diag, prior, pv.values,
                                                           tiny_data.n, 0.05)
    assert kl_rhs >= kl_exact - 1e-12


def test_bound_report_fields(tiny_spec, tiny_data, rng):
    pv = netcore.random_params(tiny_spec, rng)
    prior = genbound.PriorSpec(theta0=np.zeros(pv.size), sigmas=np.ones(pv.size))
    train, test = datagen.split_dataset(tiny_data, 6)
    rep = genbound.bound_report(tiny_spec, pv.values, prior, train, test,
                                delta=0.05, mc_draws=50, seed=0)
    assert 0.0 <= rep.train_loss_mc <= 1.0
    assert rep.pop_loss_upper >= rep.train_loss_mc
    assert rep.effective_curvature >= 0.0
    assert rep.weighted_frob >= 0.0
    assert rep.test_loss_mc is not None
    assert rep.mc_draws == 50


def test_bound_rhs_invariant_under_alpha_transform(rng):
    spec = netcore.NetSpec(5, (4, 3), 2)
    ds = datagen.generate_gauss_k(10, 5, 2, seed=3)
    pv = netcore.random_params(spec, rng)
    prior = genbound.PriorSpec(theta0=rng.standard_normal(pv.size) * 0.3,
                               sigmas=np.ones(pv.size))
    diag0 = netcore.hessian_diagonal(spec, pv.values, ds.features, ds.labels)
    _, _, _, _, _, rhs0, _ = genbound.bound_terms(diag0, prior, pv.values, ds.n, 0.05)
    for _ in range(3):
        tr = genbound.random_alpha(spec.num_layers, rng)
        pv2 = genbound.alpha_transform(pv, tr)
        prior2 = genbound.transform_prior(prior, pv.layout, tr)
        diag1 = netcore.hessian_diagonal(spec, pv2.values, ds.features, ds.labels)
        _, _, _, _, _, rhs1, _ = genbound.bound_terms(diag1, prior2, pv2.values,
                                                      ds.n, 0.05)
        assert abs(rhs0 - rhs1) <= 1e-9
        assert np.abs(diag1 - diag0).max() > 0.0


def test_pop_loss_monotone_in_budget():
    vals = []
    for budget in (0.01, 0.05, 0.2, 0.5):
        vals.append(genbound.kl_inv_upper(0.2, budget)[0])
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_hutchinson_diag_estimate_tracks_exact(tiny_spec, tiny_data, rng):
    pv = netcore.random_params(tiny_spec, rng)
    exact = netcore.hessian_diagonal(tiny_spec, pv.values, tiny_data.features,
                                     tiny_data.labels)
    est, stderr = genbound.hessian_diag_estimate(tiny_spec, pv.values,
                                                 tiny_data.features, tiny_data.labels,
                                                 dense_limit=4, probes=3000, seed=1)
    assert stderr is not None
    bad = np.abs(est - exact) > 5.0 * (stderr + 1e-12)
    assert bad.mean() < 0.01
