import numpy as np
import pytest
from scipy.stats import multivariate_normal

from dichogeo.core import ModelParams, SurveyDataset, simulate_survey
from dichogeo.linear import FitOptions, fit_linear, gaussian_loglik


def _grid(n_side, spacing=1.0 / 6.0):
    ticks = np.arange(n_side) * spacing
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _params_vector_loglik(w, dataset, p_cov):
    params = ModelParams(alpha=w[0], beta_gamma=w[1:1 + p_cov],
                         sigma2=np.exp(w[1 + p_cov]), tau2=np.exp(w[2 + p_cov]),
                         phi=np.exp(w[3 + p_cov]))
    return gaussian_loglik(params, dataset)[0]


class TestGaussianLoglik:
    def test_independence_limit_single_location(self):
        # sigma2 -> 0 test mode: sum of univariate normal log densities
        rng = np.random.default_rng(0)
        y = rng.normal(0.4, np.sqrt(0.8), 5)
        ds = SurveyDataset.from_arrays([[0.0, 0.0]], loc_index=np.zeros(5, dtype=int), y=y)
        params = ModelParams(alpha=0.4, beta_gamma=[], sigma2=1e-300, tau2=0.8, phi=0.1)
        value, _ = gaussian_loglik(params, ds)
        expect = np.sum(-0.5 * np.log(2 * np.pi * 0.8) - 0.5 * (y - 0.4) ** 2 / 0.8)
        assert value == pytest.approx(expect, rel=1e-9)

    def test_matches_dense_density_oracle(self, rng):
        # oracle: independent dense evaluation via scipy multivariate_normal
        coords = rng.uniform(0, 1, (3, 2))
        n_i = np.array([2, 1, 2])
        loc_index = np.repeat(np.arange(3), n_i)
        x = rng.normal(size=(5, 1))
        params = ModelParams(alpha=0.3, beta_gamma=[0.7], sigma2=1.2, tau2=0.6, phi=0.25)
        ds, _ = simulate_survey(coords, loc_index, x, params, seed=9)
        value, _ = gaussian_loglik(params, ds)
        d_loc = np.linalg.norm(coords[:, None] - coords[None, :], axis=-1)
        cov = params.sigma2 * np.exp(-d_loc / params.phi)[np.ix_(loc_index, loc_index)] \
            + params.tau2 * np.eye(5)
        mean = params.alpha + x[:, 0] * 0.7
        oracle = multivariate_normal(mean=mean, cov=cov).logpdf(ds.y)
        assert value == pytest.approx(oracle, rel=1e-12)

    def test_gradient_matches_central_differences(self, rng):
        # finite-difference oracle, h = 1e-5, relative 1e-5
        coords = rng.uniform(0, 1, (6, 2))
        x = rng.normal(size=(6, 1))
        params = ModelParams(alpha=0.2, beta_gamma=[-0.4], sigma2=0.9, tau2=0.7, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(6), x, params, seed=21)
        point = ModelParams(alpha=0.1, beta_gamma=[0.2], sigma2=1.1, tau2=0.5, phi=0.2)
        _, grad = gaussian_loglik(point, ds)
        w = np.array([0.1, 0.2, np.log(1.1), np.log(0.5), np.log(0.2)])
        h = 1e-5
        fd = np.array([
            (_params_vector_loglik(w + h * e, ds, 1) - _params_vector_loglik(w - h * e, ds, 1)) / (2 * h)
            for e in np.eye(5)
        ])
        assert np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-5


class TestFitLinear:
    def test_single_location_mean(self):
        rng = np.random.default_rng(4)
        y = rng.normal(1.5, 0.3, 8)
        ds = SurveyDataset.from_arrays([[0.0, 0.0]], loc_index=np.zeros(8, dtype=int), y=y)
        fit = fit_linear(ds, options=FitOptions(fix_phi=1.0, compute_info=False))
        assert fit.params.alpha == pytest.approx(float(np.mean(y)), abs=1e-6)

    def test_recovers_parameters_roughly(self):
        coords = _grid(8)
        params = ModelParams(alpha=0.5, beta_gamma=[], sigma2=1.0, tau2=0.5, phi=0.3)
        ds, _ = simulate_survey(coords, np.arange(64), None, params, seed=13)
        fit = fit_linear(ds, options=FitOptions(threshold=0.0))
        assert fit.converged
        assert fit.params.alpha == pytest.approx(0.5, abs=0.8)
        assert fit.ci95["alpha"][0] < fit.ci95["alpha"][1]

    def test_shift_equivariance(self):
        coords = _grid(7)
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=0.8, phi=0.25)
        ds, _ = simulate_survey(coords, np.arange(49), None, params, seed=17)
        fit0 = fit_linear(ds, options=FitOptions(compute_info=False))
        shifted = ds.with_outcome(y=ds.y + 3.0)
        fit1 = fit_linear(shifted, options=FitOptions(compute_info=False))
        assert fit1.params.alpha - fit0.params.alpha == pytest.approx(3.0, abs=1e-5)
        assert fit1.params.sigma2 == pytest.approx(fit0.params.sigma2, abs=1e-6)
        assert fit1.params.tau2 == pytest.approx(fit0.params.tau2, abs=1e-6)
        assert fit1.params.phi == pytest.approx(fit0.params.phi, abs=1e-6)

    def test_loglik_never_decreases_along_accepted_iterates(self):
        coords = _grid(7)
        params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=0.5, phi=0.2)
        ds, _ = simulate_survey(coords, np.arange(49), None, params, seed=23)
        from scipy.optimize import minimize

        from dichogeo.linear import _design, _profiled_negloglik

        d = ds.covariates
        d_full = np.column_stack([np.ones(49), d])
        u = ds.individual_distances()
        trace = []

        def objective(psi):
            f, g, _ = _profiled_negloglik(psi, ds, d_full, u, None)
            return f, g

        def cb(psi):
            trace.append(objective(psi)[0])

        minimize(objective, np.array([0.0, 0.0, -1.5]), jac=True, method="L-BFGS-B",
                 callback=cb, options={"maxiter": 200})
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_prevalence_view_and_cis_present(self):
        coords = _grid(7)
        params = ModelParams(alpha=0.1, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.2)
        ds, _ = simulate_survey(coords, np.arange(49), None, params, seed=29)
        fit = fit_linear(ds, options=FitOptions(threshold=0.2))
        assert fit.prevalence is not None
        assert "alpha_t" in fit.ci95 and "sigma2_t" in fit.ci95
        lo, hi = fit.ci95["sigma2_t"]
        assert 0 <= lo < hi  # lower end may underflow when phi is weakly identified
        assert fit.obs_info is not None
        assert np.max(np.abs(fit.obs_info - fit.obs_info.T)) < 1e-9

    def test_too_few_observations(self):
        from dichogeo.errors import SchemaError

        ds = SurveyDataset.from_arrays([[0.0, 0.0], [1.0, 1.0]], y=[0.1, 0.2])
        with pytest.raises(SchemaError):
            fit_linear(ds)


@pytest.mark.slow
def test_wald_coverage_smoke():
    """ci95 from the observed information covers the truth for >= 90% of
    simulated replicates at a study setting (Wald calibration smoke test)."""
    coords = _grid(9, spacing=1.0 / 8.0)
    params = ModelParams(alpha=0.0, beta_gamma=[], sigma2=1.0, tau2=1.0, phi=0.2)
    hits = 0
    total = 0
    for k in range(120):
        ds, _ = simulate_survey(coords, np.arange(81), None, params, seed=(31, k))
        fit = fit_linear(ds, options=FitOptions(threshold=0.0, n_restarts=2))
        if not fit.converged:
            continue
        lo, hi = fit.ci95["alpha"]
        hits += lo <= 0.0 <= hi
        total += 1
    assert total >= 100
    assert hits / total >= 0.90
