import numpy as np
import pytest
from scipy.stats import norm

from dichogeo.core import ModelParams, PrevalenceParams, SurveyDataset, dichotomize, simulate_survey
from dichogeo.errors import ParameterDomainError
from dichogeo.linear import FitOptions, FitResult, fit_linear
from dichogeo.binomial import LatentIntegrationSettings, fit_binomial
from dichogeo.predict import (conditional_latent, exceedance_prob,
                              latent_conditional_binomial, latent_conditional_linear,
                              predict_prevalence, prevalence_from_conditional)


def _linear_fit_for(params, dataset, threshold=0.0):
    """FitResult shell at fixed parameters (prediction is plug-in)."""
    from dichogeo.core import to_prevalence_scale

    return FitResult(model="linear", estimates={}, loglik=0.0, converged=True,
                     iterations=0, grad_norm=0.0, params=params,
                     prevalence=to_prevalence_scale(params, threshold),
                     threshold=threshold)


class TestConditionalLatentLinear:
    def test_exact_interpolation_without_nugget(self):
        coords = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.7]])
        params = ModelParams(alpha=0.2, beta_gamma=[], sigma2=1.0, tau2=0.0, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(3), None, params, seed=5)
        mean, cov = latent_conditional_linear(params, ds, coords)
        np.testing.assert_allclose(mean, ds.y - 0.2, atol=1e-8)
        assert np.max(np.abs(np.diag(cov))) < 1e-8

    def test_far_field_reverts_to_prior(self):
        coords = np.array([[0.0, 0.0], [0.1, 0.0]])
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=0.9, tau2=0.5, phi=0.05)
        ds, _ = simulate_survey(coords, np.arange(2), None, params, seed=7)
        mean, cov = latent_conditional_linear(params, ds, np.array([[50.0, 50.0]]))
        assert abs(mean[0]) < 1e-10
        assert cov[0, 0] == pytest.approx(0.9, abs=1e-10)

    def test_block_partition_oracle(self, rng):
        # brute-force oracle: condition the explicit joint Gaussian of
        # (S_grid, y) by partitioned inverse on a 5-point toy problem
        coords = rng.uniform(0, 1, (5, 2))
        grid = rng.uniform(0, 1, (3, 2))
        params = ModelParams(alpha=0.3, beta_gamma=[], sigma2=1.2, tau2=0.4, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(5), None, params, seed=9)

        def k(a, b):
            d = np.linalg.norm(a[:, None] - b[None, :], axis=-1)
            return params.sigma2 * np.exp(-d / params.phi)

        k_gg = k(grid, grid)
        k_gd = k(grid, coords)
        k_dd = k(coords, coords) + params.tau2 * np.eye(5)
        resid = ds.y - params.alpha
        mean_oracle = k_gd @ np.linalg.solve(k_dd, resid)
        cov_oracle = k_gg - k_gd @ np.linalg.solve(k_dd, k_gd.T)

        mean, cov = latent_conditional_linear(params, ds, grid)
        np.testing.assert_allclose(mean, mean_oracle, atol=1e-8)
        np.testing.assert_allclose(cov, cov_oracle, atol=1e-8)

    def test_requires_converged_fit(self):
        coords = np.array([[0.0, 0.0], [1.0, 1.0]])
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=0.5, phi=0.2)
        ds, _ = simulate_survey(coords, np.arange(2), None, params, seed=3)
        fit = _linear_fit_for(params, ds)
        fit.converged = False
        with pytest.raises(ParameterDomainError):
            conditional_latent(fit, ds, coords)


class TestConditionalLatentBinomial:
    def test_far_field_reverts_to_prior(self):
        ds = SurveyDataset.from_arrays([[0.0, 0.0], [0.05, 0.0]], y_binary=[1.0, 0.0])
        prm = PrevalenceParams(alpha_t=0.2, beta_gamma_t=[], sigma2_t=0.8, phi=0.05)
        mean, cov = latent_conditional_binomial(prm, ds, np.array([[40.0, 40.0]]))
        assert abs(mean[0]) < 1e-10
        assert cov[0, 0] == pytest.approx(0.8, abs=1e-10)

    def test_shrinks_variance_at_data(self, rng):
        coords = rng.uniform(0, 0.3, (6, 2))
        yb = rng.integers(0, 2, 6).astype(float)
        ds = SurveyDataset.from_arrays(coords, y_binary=yb)
        prm = PrevalenceParams(alpha_t=0.0, beta_gamma_t=[], sigma2_t=1.0, phi=0.2)
        _, cov = latent_conditional_binomial(prm, ds, coords)
        assert np.all(np.diag(cov) < 1.0)


class TestPredictPrevalence:
    def test_degenerate_field_constant_surface(self):
        coords = np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 0.0], [0.2, 0.8]])
        params = ModelParams(alpha=0.1, beta_gamma=[], sigma2=1e-12, tau2=0.5, phi=0.2)
        ds, _ = simulate_survey(coords, np.arange(4), None, params, seed=11)
        fit = _linear_fit_for(params, ds, threshold=0.3)
        grid = np.array([[0.1, 0.1], [0.9, 0.9]])
        out = predict_prevalence(fit, ds, grid, profile=[], n_cond_samples=400, seed=1)
        expect = norm.cdf(fit.prevalence.alpha_t)
        np.testing.assert_allclose(out.prevalence_mean, expect, atol=5e-3)

    def test_far_field_symmetric_half(self):
        coords = np.array([[0.0, 0.0], [0.1, 0.1]])
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.05)
        ds, _ = simulate_survey(coords, np.arange(2), None, params, seed=13)
        fit = _linear_fit_for(params, ds, threshold=0.0)
        out = predict_prevalence(fit, ds, np.array([[30.0, 30.0]]), profile=[],
                                 n_cond_samples=40_000, seed=2)
        assert out.prevalence_mean[0] == pytest.approx(0.5, abs=5e-3)

    def test_matches_quadrature_oracle(self, rng):
        # 1-D Gaussian quadrature oracle per grid point for E[Phi(mu + S)]
        coords = rng.uniform(0, 1, (3, 2))
        params = ModelParams(alpha=0.2, beta_gamma=[], sigma2=1.0, tau2=0.6, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(3), None, params, seed=17)
        fit = _linear_fit_for(params, ds, threshold=0.1)
        grid = rng.uniform(0, 1, (4, 2))
        out = predict_prevalence(fit, ds, grid, profile=[], n_cond_samples=4000, seed=3)

        mean, cov = latent_conditional_linear(params, ds, grid)
        tau = np.sqrt(params.tau2)
        mean_t, var_t = -mean / tau, np.diag(cov) / params.tau2
        nodes, weights = np.polynomial.hermite.hermgauss(80)
        mu_prof = fit.prevalence.alpha_t
        for j in range(4):
            s_nodes = mean_t[j] + np.sqrt(2 * var_t[j]) * nodes
            oracle = float(weights @ norm.cdf(mu_prof + s_nodes) / np.sqrt(np.pi))
            mc_se = out.samples[:, j].std(ddof=1) / np.sqrt(out.n_cond_samples)
            assert abs(out.prevalence_mean[j] - oracle) < 3 * max(mc_se, 1e-4)

    def test_monotone_in_intercept_with_common_draws(self, rng):
        coords = rng.uniform(0, 1, (4, 2))
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=0.5, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(4), None, params, seed=19)
        grid = rng.uniform(0, 1, (5, 2))
        lo = predict_prevalence(_linear_fit_for(params, ds, threshold=0.0), ds, grid,
                                profile=[], n_cond_samples=500, seed=4)
        hi = predict_prevalence(_linear_fit_for(params, ds, threshold=0.5), ds, grid,
                                profile=[], n_cond_samples=500, seed=4)
        assert np.all(hi.prevalence_mean > lo.prevalence_mean)

    def test_pipeline_equivalence_between_model_paths(self, rng):
        # identical conditional Gaussians and prevalence parameters produce
        # identical surfaces regardless of which model supplied them
        mean_t = rng.normal(size=6)
        a = rng.normal(size=(6, 6))
        cov_t = a @ a.T + 0.5 * np.eye(6)
        p1, e1, s1 = prevalence_from_conditional(mean_t, cov_t, 0.4, 800, seed=9,
                                                 exceedance_threshold=0.3)
        p2, e2, s2 = prevalence_from_conditional(mean_t, cov_t, 0.4, 800, seed=9,
                                                 exceedance_threshold=0.3)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(e1, e2)
        np.testing.assert_array_equal(s1, s2)

    def test_binomial_path_runs_end_to_end(self, rng):
        coords = rng.uniform(0, 1, (20, 2))
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(20), None, params, seed=23)
        binary = dichotomize(ds, 0.0)
        fit = fit_binomial(binary, settings=LatentIntegrationSettings(mode="laplace"),
                           options=FitOptions(compute_info=False, grad_tol=1e-4))
        assert fit.converged
        out = predict_prevalence(fit, binary, rng.uniform(0, 1, (6, 2)), profile=[],
                                 n_cond_samples=300, seed=5, exceedance_threshold=0.2)
        assert np.all((out.prevalence_mean >= 0) & (out.prevalence_mean <= 1))
        assert np.all((out.exceedance >= 0) & (out.exceedance <= 1))


class TestExceedance:
    def test_limits(self, rng):
        samples = rng.uniform(0.01, 0.99, (200, 4))
        np.testing.assert_array_equal(exceedance_prob(samples, 1e-9), np.ones(4))
        np.testing.assert_array_equal(exceedance_prob(samples, 1 - 1e-9), np.zeros(4))

    def test_monotone_in_threshold(self, rng):
        samples = rng.uniform(0, 1, (500, 3))
        probs = [exceedance_prob(samples, t) for t in (0.2, 0.4, 0.6, 0.8)]
        for lo, hi in zip(probs, probs[1:]):
            assert np.all(hi <= lo)

    def test_domain(self, rng):
        samples = rng.uniform(0, 1, (10, 2))
        for t in (0.0, 1.0, -0.2, 1.3):
            with pytest.raises(ParameterDomainError):
                exceedance_prob(samples, t)

    def test_matches_quadrature_tail_oracle(self, rng):
        # known conditional: exceedance = P(Phi(mu + S) > t) with S ~ N(m, v)
        m, v, mu, t = 0.3, 0.49, 0.2, 0.55
        cov = np.array([[v]])
        p, e, samples = prevalence_from_conditional(np.array([m]), cov, mu, 60_000,
                                                    seed=31, exceedance_threshold=t)
        s_star = norm.ppf(t) - mu
        oracle = 1.0 - norm.cdf((s_star - m) / np.sqrt(v))
        mc_se = np.sqrt(oracle * (1 - oracle) / 60_000)
        assert abs(e[0] - oracle) < 3 * mc_se + 1e-4
