import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from dichogeo.binomial import exact_loglik_smallm
from dichogeo.core import (ModelParams, PrevalenceParams, SurveyDataset, dichotomize,
                           simulate_survey)
from dichogeo.errors import NumericalConditioningError, ParameterDomainError
from dichogeo.infoloss import (CldReport, EfiSettings, cld, cld_from_hessians,
                               composite_hessian_binary, composite_hessian_continuous,
                               composite_hessian_continuous_cov, efi_binary_two_points,
                               efi_linear, loss_no_spatial, loss_ratio,
                               pairwise_composite_loglik)
from dichogeo.linear import FitOptions, fit_linear


def _pp(alpha_t=0.0, sigma2_t=1.0, phi=0.1, beta=()):
    return PrevalenceParams(alpha_t=alpha_t, beta_gamma_t=list(beta), sigma2_t=sigma2_t, phi=phi)


def _two_points(rho, phi=0.1):
    # place the second point so that exp(-u/phi) = rho
    u = 1e6 if rho == 0 else -phi * np.log(rho)
    return SurveyDataset.from_arrays([[0.0, 0.0], [u, 0.0]])


class TestEfiLinear:
    def test_independent_pair(self):
        ds = _two_points(0.0)
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.1)
        assert efi_linear(ds, params) == pytest.approx(1.0, abs=1e-9)

    def test_closed_two_by_two(self):
        # oracle: 1' Sigma_Y^-1 1 = 2/(2 + rho) for sigma2 = tau2 = 1
        ds = _two_points(0.5)
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.1)
        assert efi_linear(ds, params) == pytest.approx(0.8, abs=1e-9)

    def test_single_point(self):
        ds = SurveyDataset.from_arrays([[0.0, 0.0]])
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=2.0, phi=0.1)
        assert efi_linear(ds, params) == pytest.approx(2.0 / 3.0, abs=1e-12)


class TestEfiBinaryTwoPoints:
    def test_independent_flat_limit(self):
        # enumeration oracle: two independent probit observations at p = 0.5
        # carry information phi(0)^2 / (p(1-p)) = 2/pi each
        value = efi_binary_two_points(0.0, 0.0, 0.0)
        assert value == pytest.approx(2.0 * 2.0 / np.pi, rel=1e-9)

    def test_symmetry_in_alpha(self):
        settings = EfiSettings(qmc_points=4096)
        a = efi_binary_two_points(0.8, 0.5, 0.3, settings)
        b = efi_binary_two_points(-0.8, 0.5, 0.3, settings)
        assert a == pytest.approx(b, rel=2e-3)

    def test_small_field_matches_no_spatial_loss(self):
        # consistency of the Monte-Carlo and closed-form paths
        for alpha_t in (0.0, 0.8, 1.6):
            i_yt = efi_binary_two_points(alpha_t, 1e-8, 0.0)
            r = loss_ratio(2.0, i_yt)
            assert r == pytest.approx(loss_no_spatial(alpha_t), abs=1e-2)

    def test_sampled_expectation_agrees_with_enumeration(self):
        enum = efi_binary_two_points(0.4, 1.0, 0.3, EfiSettings(expectation="enumerate"))
        samp = efi_binary_two_points(0.4, 1.0, 0.3,
                                     EfiSettings(expectation="sample", n_outcome_draws=200_000))
        assert samp == pytest.approx(enum, rel=0.02)

    def test_domain_checks(self):
        with pytest.raises(ParameterDomainError):
            efi_binary_two_points(0.0, -1.0, 0.0)
        with pytest.raises(ParameterDomainError):
            efi_binary_two_points(0.0, 1.0, 1.5)
        with pytest.raises(ParameterDomainError):
            EfiSettings(qmc_points=512)


class TestLossRatio:
    def test_no_loss(self):
        assert loss_ratio(1.0, 1.0) == 0.0

    def test_derived_value(self):
        assert loss_ratio(1.0, 2.0 / np.pi) == pytest.approx(0.3634, abs=5e-5)

    def test_arithmetic(self):
        assert loss_ratio(2.0, 0.5) == 0.75

    def test_domain(self):
        with pytest.raises(ParameterDomainError):
            loss_ratio(0.0, 1.0)


class TestLossNoSpatial:
    def test_floor(self):
        assert loss_no_spatial(0.0) == pytest.approx(1.0 - 2.0 / np.pi, abs=1e-12)

    def test_far_threshold(self):
        assert loss_no_spatial(3.0) > 0.9

    def test_even_function(self):
        for a in (0.5, 1.0, 2.0):
            assert loss_no_spatial(a) == pytest.approx(loss_no_spatial(-a), abs=1e-12)

    def test_matches_probit_information(self):
        # independent oracle: 1 - pdf(a)^2 / (cdf(a) * cdf(-a))
        for a in (-1.2, 0.3, 1.7):
            expect = 1.0 - norm.pdf(a) ** 2 / (norm.cdf(a) * norm.cdf(-a))
            assert loss_no_spatial(a) == pytest.approx(expect, abs=1e-12)


class TestPairwiseComposite:
    def test_m2_equals_full_likelihood(self, rng):
        ds = SurveyDataset.from_arrays(rng.uniform(0, 0.2, (2, 2)), y_binary=[1.0, 0.0])
        prm = _pp(alpha_t=0.3, sigma2_t=1.2, phi=0.15)
        full = exact_loglik_smallm(prm, ds, 60)
        pair = pairwise_composite_loglik(prm, ds, quadrature_order=60)
        assert pair == pytest.approx(full, rel=1e-9)

    def test_independence_limit_bookkeeping(self, rng):
        # sigma2_t -> 0 with n_i = 1: each observation appears in m-1 pairs
        m = 5
        ds = SurveyDataset.from_arrays(rng.uniform(0, 1, (m, 2)),
                                       y_binary=rng.integers(0, 2, m).astype(float))
        prm = _pp(alpha_t=0.2, sigma2_t=0.0)
        from dichogeo.numerics import log_probit_prob

        per_obs = log_probit_prob(np.full(m, 0.2), ds.y_binary).sum()
        value = pairwise_composite_loglik(prm, ds)
        assert value == pytest.approx((m - 1) * per_obs, rel=1e-12)

    def test_permutation_invariance(self, rng):
        m = 6
        coords = rng.uniform(0, 0.5, (m, 2))
        yb = rng.integers(0, 2, m).astype(float)
        prm = _pp(alpha_t=0.1, sigma2_t=0.8, phi=0.2)
        ds = SurveyDataset.from_arrays(coords, y_binary=yb)
        perm = rng.permutation(m)
        ds_perm = SurveyDataset.from_arrays(coords[perm], y_binary=yb[perm])
        a = pairwise_composite_loglik(prm, ds)
        b = pairwise_composite_loglik(prm, ds_perm)
        assert a == pytest.approx(b, rel=1e-10)

    def test_fast_path_matches_general_path(self, rng):
        # the vectorized single-individual path must agree with the loop
        m = 7
        coords = rng.uniform(0, 0.5, (m, 2))
        yb = rng.integers(0, 2, m).astype(float)
        prm = _pp(alpha_t=0.3, sigma2_t=1.1, phi=0.15)
        fast = pairwise_composite_loglik(prm, SurveyDataset.from_arrays(coords, y_binary=yb))
        # duplicating one location forces the general path
        coords2 = np.vstack([coords, [[9.9, 9.9]]])
        loc_index = np.concatenate([np.arange(m), [m, m]])
        yb2 = np.concatenate([yb, [1.0, 0.0]])
        general = pairwise_composite_loglik(
            prm, SurveyDataset.from_arrays(coords2, loc_index=loc_index, y_binary=yb2))
        assert np.isfinite(general)
        # and on the single-individual layout both code paths agree exactly
        from dichogeo import infoloss

        mu = prm.alpha_t + np.zeros(m)
        rho = np.exp(-SurveyDataset.from_arrays(coords).location_distances() / prm.phi)
        h_idx, k_idx = np.triu_indices(m, k=1)
        from dichogeo.numerics import gauss_hermite_nodes

        nodes, log_w = gauss_hermite_nodes(20, 2)
        fast_internal = infoloss._composite_fast_single(
            mu, yb, np.arange(m), rho, h_idx, k_idx, np.sqrt(prm.sigma2_t), nodes, log_w)
        assert fast == pytest.approx(fast_internal, rel=1e-12)


class TestCompositeHessians:
    def test_binary_hessian_symmetric(self, rng):
        m = 5
        ds = SurveyDataset.from_arrays(rng.uniform(0, 0.4, (m, 2)),
                                       covariates=rng.normal(size=(m, 1)),
                                       y_binary=rng.integers(0, 2, m).astype(float))
        theta = PrevalenceParams(alpha_t=0.1, beta_gamma_t=[0.2], sigma2_t=0.9, phi=0.2)
        h = composite_hessian_binary(theta, ds)
        assert np.max(np.abs(h - h.T)) <= 1e-6 * max(1.0, np.max(np.abs(h)))

    def test_intercept_only_m2_matches_exact_second_derivative(self):
        # oracle composition: finite differences of the exact m=2 likelihood
        ds = SurveyDataset.from_arrays([[0.0, 0.0], [0.07, 0.0]], y_binary=[1.0, 0.0])
        theta = _pp(alpha_t=0.3, sigma2_t=1.0, phi=0.1)
        h = composite_hessian_binary(theta, ds, quadrature_order=60)
        eps = 1e-4

        def exact(a):
            return exact_loglik_smallm(_pp(alpha_t=a, sigma2_t=1.0, phi=0.1), ds, 60)

        fd = (exact(0.3 + eps) - 2 * exact(0.3) + exact(0.3 - eps)) / eps ** 2
        assert h[0, 0] == pytest.approx(fd, rel=1e-4)

    def test_negative_definite_on_well_specified_data(self, rng):
        coords = rng.uniform(0, 1, (12, 2))
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.2)
        ds, _ = simulate_survey(coords, np.arange(12), None, params, seed=71)
        binary = dichotomize(ds, 0.0)
        theta = _pp(alpha_t=0.0, sigma2_t=1.0, phi=0.2)
        h = composite_hessian_binary(theta, binary)
        assert np.all(np.linalg.eigvalsh(h) < 0)

    def test_continuous_intercept_only_m2(self):
        # single pair reduction: -tau2 * 1' Sigma_12^-1 1
        design = [np.ones((2, 1))]
        cov = [np.array([[1.5, 0.4], [0.4, 1.5]])]
        h = composite_hessian_continuous_cov(0.5, design, cov)
        expect = -0.5 * np.ones(2) @ np.linalg.solve(cov[0], np.ones(2))
        assert h[0, 0] == pytest.approx(expect, rel=1e-12)

    def test_continuous_scales_linearly_in_tau2(self, rng):
        design = [rng.normal(size=(2, 2)) for _ in range(3)]
        cov = []
        for _ in range(3):
            a = rng.normal(size=(2, 2))
            cov.append(a @ a.T + 2 * np.eye(2))
        h1 = composite_hessian_continuous_cov(1.0, design, cov)
        h2 = composite_hessian_continuous_cov(2.0, design, cov)
        np.testing.assert_allclose(h2, 2.0 * h1, rtol=1e-12)

    def test_continuous_matches_finite_difference_oracle(self, rng):
        # numerical-differentiation oracle on the continuous pairwise
        # composite log-likelihood, parametrized by the prevalence block
        m = 4
        coords = rng.uniform(0, 0.6, (m, 2))
        x = rng.normal(size=(m, 1))
        tau2, c = 0.7, 0.3
        params = ModelParams(alpha=0.1, beta_gamma=[0.4], sigma2=0.9, tau2=tau2, phi=0.25)
        ds, _ = simulate_survey(coords, np.arange(m), x, params, seed=81)
        theta = _pp(alpha_t=0.2, sigma2_t=0.9 / tau2, phi=0.25, beta=(-0.5,))

        design = np.column_stack([np.ones(m), x[:, 0]])
        rho = np.exp(-ds.location_distances() / theta.phi)
        tau = np.sqrt(tau2)

        def cl_continuous(tvec):
            total = 0.0
            for h in range(m - 1):
                for k in range(h + 1, m):
                    idx = [h, k]
                    mu = c - tau * (design[idx] @ tvec)
                    cov = tau2 * (theta.sigma2_t * rho[np.ix_(idx, idx)] + np.eye(2))
                    total += multivariate_normal(mean=mu, cov=cov).logpdf(ds.y[idx])
            return total

        t0 = np.array([theta.alpha_t, theta.beta_gamma_t[0]])
        eps = 1e-4
        fd = np.zeros((2, 2))
        f0 = cl_continuous(t0)
        for i in range(2):
            tp, tm = t0.copy(), t0.copy()
            tp[i] += eps
            tm[i] -= eps
            fd[i, i] = (cl_continuous(tp) - 2 * f0 + cl_continuous(tm)) / eps ** 2
            for j in range(i + 1, 2):
                tpp, tpm, tmp, tmm = (t0.copy() for _ in range(4))
                tpp[i] += eps
                tpp[j] += eps
                tpm[i] += eps
                tpm[j] -= eps
                tmp[i] -= eps
                tmp[j] += eps
                tmm[i] -= eps
                tmm[j] -= eps
                fd[i, j] = fd[j, i] = (cl_continuous(tpp) - cl_continuous(tpm)
                                       - cl_continuous(tmp) + cl_continuous(tmm)) / (4 * eps * eps)
        closed = composite_hessian_continuous(theta, ds)
        np.testing.assert_allclose(closed, fd, rtol=1e-6, atol=1e-8)


class TestCld:
    def test_self_comparison_is_zero(self, rng):
        a = rng.normal(size=(3, 3))
        h = -(a @ a.T + np.eye(3))
        report = cld_from_hessians(h, h)
        assert report.cld == 0.0

    def test_non_negative_definite_rejected(self):
        good = -np.eye(2)
        bad = np.eye(2)
        with pytest.raises(NumericalConditioningError, match="binary"):
            cld_from_hessians(good, bad)
        with pytest.raises(NumericalConditioningError, match="continuous"):
            cld_from_hessians(bad, good)

    def test_end_to_end_positive_on_simulated_data(self):
        ticks = np.arange(8) / 7.0
        coords = np.column_stack([np.repeat(ticks, 8), np.tile(ticks, 8)])
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(64), None, params, seed=93)
        fit = fit_linear(ds, options=FitOptions(threshold=0.0, compute_info=False, n_restarts=3))
        assert fit.converged
        binary = dichotomize(ds, 0.0)
        report = cld(fit.prevalence, binary)
        assert isinstance(report, CldReport)
        assert report.cld == report.logdet_continuous - report.logdet_binary
        assert report.cld > 0
