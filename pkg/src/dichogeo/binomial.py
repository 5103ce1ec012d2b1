"""Maximum likelihood for the binomial probit geostatistical model.

The latent field is integrated out with a Laplace approximation (Newton on
the conditional mode, which is concave for probit), optionally refined by an
importance-sampling correction that uses the Laplace Gaussian as proposal
with scrambled-Sobol draws, so results are deterministic for a fixed seed.
A dense tensor Gauss-Hermite oracle covers m <= 3 for validation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import log_ndtr, logsumexp, ndtri
from scipy.stats import qmc

from .core import PrevalenceParams, SurveyDataset
from .errors import (NonConvergenceError, ParameterDomainError, SchemaError,
                     UnsupportedSizeError)
from .linear import FitOptions, FitResult
from .numerics import (chol_logdet, chol_solve, derive_rng, gauss_hermite_nodes,
                       log_probit_prob, norm_logpdf, probit_cdf, probit_terms,
                       safe_cholesky, sobol_normal)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LatentIntegrationSettings:
    """How the latent-field integral is approximated.

    ``laplace`` is deterministic; ``laplace_is`` multiplies in an importance
    sampling correction with ``is_samples`` draws from the Laplace Gaussian.
    ``quadrature_order`` controls the small-m exact oracle.
    """

    mode: str = "laplace"
    is_samples: int = 2000
    inner_tol: float = 1e-8
    max_inner_iter: int = 50
    quadrature_order: int = 40
    seed: int = 0
    is_proposal_scale: float = 1.5   # defensive variance inflation of the proposal
    mcml_rounds: int = 2
    mcml_burn: int = 300
    mcml_thin: int = 3

    def __post_init__(self):
        if self.mode not in ("laplace", "laplace_is", "ep", "ghk", "mcml"):
            raise ParameterDomainError(f"unknown integration mode {self.mode!r}")
        if self.mode in ("laplace_is", "ghk", "mcml") and self.is_samples < 100:
            raise ParameterDomainError(f"{self.mode} needs at least 100 draws")
        if self.quadrature_order < 20:
            raise ParameterDomainError("quadrature_order must be at least 20")


@dataclass
class LaplaceState:
    """Mode and curvature of the conditional latent density given the data."""

    mode: np.ndarray          # (m,) conditional mode of s_t
    grad_terms: np.ndarray    # (m,) per-location gradient of g at the mode
    w: np.ndarray             # (m,) per-location negative curvature of g
    cov_t: np.ndarray         # (m, m) latent prior covariance
    b_chol: np.ndarray        # chol of B = I + sqrt(W) cov_t sqrt(W)
    loglik: float             # Laplace approximation of the marginal log-lik
    iterations: int


def _eta(params: PrevalenceParams, dataset: SurveyDataset, s_t):
    if params.beta_gamma_t.size != dataset.covariates.shape[1]:
        raise SchemaError("prevalence parameter vector does not match the design")
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    return mu + np.asarray(s_t)[dataset.loc_index]


def conditional_binary_loglik(params: PrevalenceParams, dataset: SurveyDataset, s_t):
    """g(y~ | s~): Bernoulli-probit log-likelihood at a fixed latent vector."""
    if dataset.y_binary is None:
        raise SchemaError("binary outcomes are required")
    eta = _eta(params, dataset, s_t)
    return float(np.sum(log_probit_prob(eta, dataset.y_binary)))


def _latent_cov(params: PrevalenceParams, dataset: SurveyDataset):
    d = dataset.location_distances()
    return params.sigma2_t * np.exp(-d / params.phi)


def laplace_state(params: PrevalenceParams, dataset: SurveyDataset,
                  settings: LatentIntegrationSettings, warm_start=None) -> LaplaceState:
    """Newton iteration for the conditional mode of the latent field.

    Uses the standard B = I + W^1/2 K W^1/2 formulation so only one m-by-m
    Cholesky per Newton step is required and the prior never needs explicit
    inversion.  The conditional log-density is concave, so undamped Newton
    with a step-halving safeguard converges quickly.
    """
    if dataset.y_binary is None:
        raise SchemaError("binary outcomes are required")
    m = dataset.n_locations
    cov_t = _latent_cov(params, dataset)
    yb = dataset.y_binary
    idx = dataset.loc_index
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t

    if warm_start is None:
        f = np.zeros(m)
        a = np.zeros(m)
    else:
        # keep the pair consistent with f = cov_t a, which psi relies on
        f = np.array(warm_start, dtype=float)
        prior_chol, _ = safe_cholesky(cov_t, what="latent prior covariance")
        a = chol_solve(prior_chol, f)

    def parts(fvec):
        lp, dg, d2g = probit_terms(mu + fvec[idx], yb)
        return (float(np.sum(lp)),
                np.bincount(idx, weights=dg, minlength=m),
                np.bincount(idx, weights=-d2g, minlength=m))

    g_val, grad, w = parts(f)
    psi = g_val - 0.5 * float(a @ f)
    converged = False
    for it in range(settings.max_inner_iter):
        sqrt_w = np.sqrt(np.maximum(w, 0.0))
        b = np.eye(m) + sqrt_w[:, None] * cov_t * sqrt_w[None, :]
        b_chol, _ = safe_cholesky(b, what="Laplace inner system")
        bvec = w * f + grad
        tmp = sqrt_w * (cov_t @ bvec)
        a_new = bvec - sqrt_w * chol_solve(b_chol, tmp)
        f_new = cov_t @ a_new

        # Convergence is judged on the undamped proposal (its length bounds
        # the distance to the optimum once Newton enters its quadratic phase).
        delta = float(np.max(np.abs(f_new - f)))
        small = delta < settings.inner_tol * (1.0 + float(np.max(np.abs(f))))

        step = 1.0
        slack = 1e-9 * (1.0 + abs(psi))  # tolerate evaluation noise near the top
        for _ in range(15):
            f_try = f + step * (f_new - f)
            a_try = a + step * (a_new - a)
            g_try, grad_try, w_try = parts(f_try)
            psi_try = g_try - 0.5 * float(a_try @ f_try)
            if psi_try >= psi - slack:
                break
            step *= 0.5
        f, a, g_val, grad, w, psi = f_try, a_try, g_try, grad_try, w_try, psi_try
        if small:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(
            f"Laplace mode search did not converge in {settings.max_inner_iter} iterations "
            f"(last step {delta:.3e})"
        )

    sqrt_w = np.sqrt(np.maximum(w, 0.0))
    b = np.eye(m) + sqrt_w[:, None] * cov_t * sqrt_w[None, :]
    b_chol, _ = safe_cholesky(b, what="Laplace inner system")
    loglik = g_val - 0.5 * float(a @ f) - 0.5 * chol_logdet(b_chol)
    return LaplaceState(mode=f, grad_terms=grad, w=w, cov_t=cov_t, b_chol=b_chol,
                        loglik=loglik, iterations=it + 1)


def _nonspatial_loglik(params, dataset):
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    return float(np.sum(log_probit_prob(mu, dataset.y_binary)))


def integrated_loglik(params: PrevalenceParams, dataset: SurveyDataset,
                      settings: Optional[LatentIntegrationSettings] = None,
                      warm_start=None):
    """Marginal log-likelihood of the binary data with the latent field integrated out."""
    settings = settings or LatentIntegrationSettings()
    if params.sigma2_t == 0:
        return _nonspatial_loglik(params, dataset)
    if settings.mode == "ghk":
        return ghk_loglik(params, dataset, settings)
    if settings.mode == "ep":
        return ep_loglik(params, dataset, settings)
    state = laplace_state(params, dataset, settings, warm_start=warm_start)
    if settings.mode == "laplace":
        return state.loglik
    return state.loglik + _is_correction(params, dataset, settings, state)


def ep_loglik(params: PrevalenceParams, dataset: SurveyDataset,
              settings: Optional[LatentIntegrationSettings] = None,
              warm_sites=None, return_sites=False):
    """Expectation-propagation estimate of the marginal log-likelihood.

    Damped parallel EP with one Gaussian site per individual on the
    individual-level latent field (co-located individuals simply share
    duplicated prior rows).  Deterministic, and far more accurate than the
    Laplace approximation for binary data with one observation per latent
    value, where Laplace systematically shrinks the field variance.
    """
    settings = settings or LatentIntegrationSettings()
    if dataset.y_binary is None:
        raise SchemaError("binary outcomes are required")
    if params.sigma2_t == 0:
        return (_nonspatial_loglik(params, dataset), None) if return_sites else _nonspatial_loglik(params, dataset)
    n = dataset.n_individuals
    u = dataset.individual_distances()
    k_prior = params.sigma2_t * np.exp(-u / params.phi)
    sign = 2.0 * dataset.y_binary - 1.0
    offset = params.alpha_t + dataset.covariates @ params.beta_gamma_t

    if warm_sites is not None:
        tau_site = np.array(warm_sites[0], dtype=float)
        nu_site = np.array(warm_sites[1], dtype=float)
    else:
        tau_site = np.zeros(n)
        nu_site = np.zeros(n)

    damping = 0.7
    eye = np.eye(n)
    converged = False
    for _ in range(settings.max_inner_iter * 4):
        sqrt_t = np.sqrt(np.maximum(tau_site, 0.0))
        b = eye + sqrt_t[:, None] * k_prior * sqrt_t[None, :]
        b_chol, _ = safe_cholesky(b, what="EP inner system")
        v = solve_triangular(b_chol, sqrt_t[:, None] * k_prior, lower=True, check_finite=False)
        sigma = k_prior - v.T @ v
        sigma_diag = np.maximum(np.diag(sigma), 1e-12)
        mu = sigma @ nu_site

        tau_cav = np.maximum(1.0 / sigma_diag - tau_site, 1e-10)
        nu_cav = mu / sigma_diag - nu_site
        s2_cav = 1.0 / tau_cav
        mu_cav = nu_cav * s2_cav

        denom = np.sqrt(1.0 + s2_cav)
        z = sign * (mu_cav + offset) / denom
        ratio = np.exp(norm_logpdf(z) - log_ndtr(z))
        mu_hat = mu_cav + sign * s2_cav * ratio / denom
        s2_hat = np.maximum(s2_cav - s2_cav ** 2 * ratio * (z + ratio) / (1.0 + s2_cav), 1e-12)

        tau_new = np.maximum(1.0 / s2_hat - tau_cav, 1e-10)
        nu_new = mu_hat / s2_hat - nu_cav
        d_tau = float(np.max(np.abs(tau_new - tau_site)))
        d_nu = float(np.max(np.abs(nu_new - nu_site)))
        tau_site = (1.0 - damping) * tau_site + damping * tau_new
        nu_site = (1.0 - damping) * nu_site + damping * nu_new
        if max(d_tau, d_nu) < 1e-7:
            converged = True
            break
    if not converged:
        raise NonConvergenceError("EP site updates did not converge")

    value = _ep_logz(k_prior, tau_site, nu_site, sign, offset)
    if return_sites:
        return value, (tau_site, nu_site)
    return value


def _ep_logz(k_prior, tau_site, nu_site, sign, offset):
    """Exact evidence of the site-approximated model.

    Each site is scaled so it integrates like the true probit factor against
    its cavity; the remaining integral is the Gaussian density of the site
    means under N(0, K + V).
    """
    n = tau_site.size
    sqrt_t = np.sqrt(tau_site)
    b = np.eye(n) + sqrt_t[:, None] * k_prior * sqrt_t[None, :]
    b_chol, _ = safe_cholesky(b, what="EP inner system")
    v = solve_triangular(b_chol, sqrt_t[:, None] * k_prior, lower=True, check_finite=False)
    sigma = k_prior - v.T @ v
    sigma_diag = np.maximum(np.diag(sigma), 1e-12)
    mu = sigma @ nu_site

    tau_cav = np.maximum(1.0 / sigma_diag - tau_site, 1e-10)
    nu_cav = mu / sigma_diag - nu_site
    s2_cav = 1.0 / tau_cav
    mu_cav = nu_cav * s2_cav

    denom = np.sqrt(1.0 + s2_cav)
    z = sign * (mu_cav + offset) / denom
    log_zhat = log_ndtr(z)

    v_site = 1.0 / tau_site
    m_site = nu_site * v_site
    # site normalizers: Zhat_i / N(m_i; mu_cav_i, v_i + s2_cav_i)
    var_im = v_site + s2_cav
    log_site_norm = log_zhat + 0.5 * (np.log(2 * np.pi * var_im) + (m_site - mu_cav) ** 2 / var_im)

    cov_m = k_prior + np.diag(v_site)
    l_m, _ = safe_cholesky(cov_m, what="EP evidence covariance")
    white = solve_triangular(l_m, m_site, lower=True, check_finite=False)
    log_gauss = -0.5 * (n * _LOG_2PI + float(white @ white)) - float(np.sum(np.log(np.diag(l_m))))
    return float(np.sum(log_site_norm) + log_gauss)


def ghk_loglik(params: PrevalenceParams, dataset: SurveyDataset,
               settings: Optional[LatentIntegrationSettings] = None):
    """GHK sequential importance sampler for the marginal log-likelihood.

    Probit data make the marginal likelihood an orthant probability of an
    N(0, sigma2_t R + I) vector (latent field plus unit probit noise), which
    GHK estimates by sequentially conditioned truncated-normal draws along
    the Cholesky of the sign-flipped covariance.  Scrambled-Sobol uniforms
    keep the estimate deterministic given the seed and smooth in the
    parameters (common random numbers).
    """
    settings = settings or LatentIntegrationSettings()
    if dataset.y_binary is None:
        raise SchemaError("binary outcomes are required")
    if params.sigma2_t == 0:
        return _nonspatial_loglik(params, dataset)
    n = dataset.n_individuals
    u = dataset.individual_distances()
    cov = params.sigma2_t * np.exp(-u / params.phi) + np.eye(n)
    signs = 2.0 * dataset.y_binary - 1.0
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    bound = signs * mu
    l_chol, _ = safe_cholesky(cov * np.outer(signs, signs), what="orthant covariance")

    sampler = qmc.Sobol(d=n, scramble=True, seed=derive_rng(settings.seed, 11))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        uni = sampler.random(settings.is_samples)
    uni = np.clip(uni, 1e-15, 1.0 - 1e-15)

    k = settings.is_samples
    eta = np.empty((k, n))
    log_p = np.zeros(k)
    for i in range(n):
        cond_mean = eta[:, :i] @ l_chol[i, :i] if i else 0.0
        t = (bound[i] - cond_mean) / l_chol[i, i]
        log_phi_t = log_ndtr(t)
        log_p += log_phi_t
        # inverse-CDF draw from the upper-truncated standard normal
        eta[:, i] = ndtri(np.clip(uni[:, i] * np.exp(log_phi_t), 1e-300, 1.0 - 1e-16))
    return float(logsumexp(log_p) - np.log(k))


def _is_correction(params, dataset, settings, state: LaplaceState):
    """Importance-sampling log correction using the Laplace Gaussian proposal.

    Scrambled-Sobol standard normals are pushed through the conditional
    covariance factor; the correction is logmeanexp of the weight ratio, so
    it vanishes when the Laplace approximation is exact.
    """
    m = dataset.n_locations
    cov_t = state.cov_t
    sqrt_w = np.sqrt(np.maximum(state.w, 0.0))
    v = solve_triangular(state.b_chol, sqrt_w[:, None] * cov_t, lower=True, check_finite=False)
    # defensive scaling keeps the proposal tails above the target's, which
    # probit skew would otherwise leave under-covered
    cond_cov = settings.is_proposal_scale * (cov_t - v.T @ v)
    l_cond, _ = safe_cholesky(cond_cov, what="Laplace conditional covariance")

    z = sobol_normal(settings.is_samples, m, derive_rng(settings.seed, 7))
    draws = state.mode[None, :] + z @ l_cond.T

    prior_chol, _ = safe_cholesky(cov_t, what="latent prior covariance")
    white = solve_triangular(prior_chol, draws.T, lower=True, check_finite=False)
    log_prior = -0.5 * np.sum(white * white, axis=0) - 0.5 * chol_logdet(prior_chol) - 0.5 * m * _LOG_2PI
    log_q = -0.5 * np.sum(z * z, axis=1) - 0.5 * chol_logdet(l_cond) - 0.5 * m * _LOG_2PI

    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    eta = mu[None, :] + draws[:, dataset.loc_index]
    g = log_probit_prob(eta, dataset.y_binary[None, :]).sum(axis=1)

    log_w = log_prior + g - log_q
    return float(logsumexp(log_w) - np.log(settings.is_samples) - state.loglik)


def exact_loglik_smallm(params: PrevalenceParams, dataset: SurveyDataset,
                        quadrature_order: int = 40):
    """Dense tensor Gauss-Hermite evaluation of the marginal log-likelihood.

    Whitens the latent pair/triple by the triangular factor of its covariance
    and integrates on an order**m grid; only supported for m <= 3.
    """
    if dataset.n_locations > 3:
        raise UnsupportedSizeError(f"the quadrature oracle supports m <= 3, got m={dataset.n_locations}")
    if dataset.y_binary is None:
        raise SchemaError("binary outcomes are required")
    if params.sigma2_t == 0:
        return _nonspatial_loglik(params, dataset)
    m = dataset.n_locations
    cov_t = _latent_cov(params, dataset)
    l_chol, _ = safe_cholesky(cov_t, what="latent covariance")
    nodes, log_w = gauss_hermite_nodes(quadrature_order, m)
    s = nodes @ l_chol.T
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    eta = mu[None, :] + s[:, dataset.loc_index]
    g = log_probit_prob(eta, dataset.y_binary[None, :]).sum(axis=1)
    return float(logsumexp(log_w + g))


def elliptical_slice_samples(params: PrevalenceParams, dataset: SurveyDataset,
                             n_samples, burn, thin, seed, start=None):
    """Samples of the latent field given the binary data at fixed parameters.

    Elliptical slice sampling: tuning-free for Gaussian priors, with one
    cheap likelihood evaluation per shrinkage step.  Returns an
    (n_samples, m) array; deterministic for a fixed seed.
    """
    m = dataset.n_locations
    cov_t = _latent_cov(params, dataset)
    l_prior, _ = safe_cholesky(cov_t, what="latent prior covariance")
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    idx = dataset.loc_index
    yb = dataset.y_binary

    def loglik(s):
        return float(np.sum(log_probit_prob(mu + s[idx], yb)))

    rng = derive_rng(seed)
    s = np.zeros(m) if start is None else np.array(start, dtype=float)
    out = np.empty((n_samples, m))
    kept = 0
    total = burn + n_samples * thin
    ll = loglik(s)
    for it in range(total):
        nu = l_prior @ rng.standard_normal(m)
        log_u = ll + np.log(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * np.pi)
        lo, hi = angle - 2.0 * np.pi, angle
        while True:
            s_prop = s * np.cos(angle) + nu * np.sin(angle)
            ll_prop = loglik(s_prop)
            if ll_prop > log_u:
                s, ll = s_prop, ll_prop
                break
            if angle < 0:
                lo = angle
            else:
                hi = angle
            angle = rng.uniform(lo, hi)
        if it >= burn and (it - burn) % thin == 0 and kept < n_samples:
            out[kept] = s
            kept += 1
    return out


def mcml_fit(dataset: SurveyDataset, init: PrevalenceParams,
             settings: LatentIntegrationSettings, options):
    """Monte Carlo maximum likelihood for the binomial probit model.

    Geyer-style simulated likelihood: sample the latent field conditional on
    the data at an anchor parameter, maximize the Monte-Carlo estimate of
    the likelihood ratio against the anchor over fixed samples, then re-
    anchor and repeat.  The ratio estimate degrades away from the anchor,
    which keeps the maximizer inside the region the samples can support; on
    near-flat likelihood ridges (dichotomized rough fields) this behaves
    like the Monte-Carlo likelihood inference the estimates are compared
    against, where an exact maximizer would drift arbitrarily far.
    """
    from .linear import projected_grad_norm

    m = dataset.n_locations
    dist_loc = dataset.location_distances()
    idx = dataset.loc_index
    yb = dataset.y_binary
    p = dataset.covariates.shape[1]
    max_d = max(float(dist_loc.max()), 1e-12)
    bounds = ([(-40.0, 40.0)] * (1 + p)
              + [(-18.5, 13.8)]
              + [(np.log(max_d) - 9.3, np.log(max_d) + 7.0)])

    def unpack(w):
        return PrevalenceParams(alpha_t=float(w[0]), beta_gamma_t=w[1:1 + p],
                                sigma2_t=float(np.exp(w[1 + p])), phi=float(np.exp(w[2 + p])))

    def pack(prm):
        return np.concatenate([[prm.alpha_t], prm.beta_gamma_t,
                               [np.log(prm.sigma2_t), np.log(prm.phi)]])

    def g_matrix(w, samples):
        mu = w[0] + dataset.covariates @ w[1:1 + p]
        eta = mu[None, :] + samples[:, idx]
        return log_probit_prob(eta, yb[None, :]).sum(axis=1)

    w_anchor = np.clip(pack(init), [b[0] for b in bounds], [b[1] for b in bounds])
    res = None
    samples = None
    lw_final = None
    mode_start = None
    for rnd in range(settings.mcml_rounds):
        prm0 = unpack(w_anchor)
        try:
            mode_start = laplace_state(prm0, dataset, settings, warm_start=mode_start).mode
        except NonConvergenceError:
            mode_start = None
        samples = elliptical_slice_samples(
            prm0, dataset, settings.is_samples, settings.mcml_burn, settings.mcml_thin,
            seed=derive_rng(settings.seed, 13, rnd), start=mode_start)

        chol_cache = {}

        def prior_quad(log_phi):
            key = float(log_phi)
            if key not in chol_cache:
                corr = np.exp(-dist_loc / np.exp(key))
                l_r, _ = safe_cholesky(corr, what="latent correlation")
                white = solve_triangular(l_r, samples.T, lower=True, check_finite=False)
                chol_cache[key] = (np.sum(white * white, axis=0), chol_logdet(l_r))
            return chol_cache[key]

        g_cache = {}

        def g_part(w):
            key = tuple(np.round(w[:1 + p], 14))
            if key not in g_cache:
                g_cache[key] = g_matrix(w, samples)
            return g_cache[key]

        def log_weights(w):
            q, logdet_r = prior_quad(w[2 + p])
            sigma2_t = np.exp(w[1 + p])
            log_prior = -0.5 * (q / sigma2_t + m * np.log(sigma2_t) + logdet_r)
            return log_prior + g_part(w)

        lw0 = log_weights(w_anchor)

        def negobj(w):
            return -float(logsumexp(log_weights(w) - lw0) - np.log(samples.shape[0]))

        def fd_grad(w, h=1e-4):
            g = np.zeros_like(w)
            for j in range(w.size):
                wp, wm = w.copy(), w.copy()
                wp[j] += h
                wm[j] -= h
                g[j] = (negobj(wp) - negobj(wm)) / (2 * h)
            return g

        res = minimize(negobj, w_anchor, jac=fd_grad, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": options.max_iter, "ftol": 1e-12,
                                "gtol": 0.5 * options.grad_tol})
        moved = float(np.max(np.abs(res.x - w_anchor)))
        w_anchor = res.x
        lw_final = log_weights(res.x) - lw0
        last_negobj, last_fd_grad = negobj, fd_grad
        if moved < 1e-4:
            break

    grad_norm = projected_grad_norm(last_fd_grad(res.x), res.x, bounds)
    prevalence = unpack(res.x)
    weights = np.exp(lw_final - logsumexp(lw_final))
    latent_mean = weights @ samples
    latent_var = np.maximum(weights @ (samples ** 2) - latent_mean ** 2, 0.0)
    ess = float(1.0 / np.sum(weights ** 2))
    hess = _fd_hessian(last_negobj, res.x) if options.compute_info else None
    return res, prevalence, grad_norm, bounds, hess, {
        "latent_mean": latent_mean, "latent_var": latent_var,
        "mcml_ess": ess, "mcml_anchor_rounds": rnd + 1,
    }


def probit_regression(x, y, max_iter=30, tol=1e-10):
    """Plain (non-spatial) probit GLM by Fisher scoring; used for initialization.

    ``x`` includes the intercept column.  Separation is handled by capping
    the linear predictor; callers treat huge coefficients as a boundary flag.
    """
    n, p = x.shape
    beta = np.zeros(p)
    beta[0] = ndtri(np.clip(np.mean(y), 0.01, 0.99))
    for _ in range(max_iter):
        eta = np.clip(x @ beta, -7.0, 7.0)
        prob = probit_cdf(eta)
        pdf = np.exp(-0.5 * eta * eta) / np.sqrt(2 * np.pi)
        wgt = pdf * pdf / (prob * (1 - prob))
        score = x.T @ (pdf * (y - prob) / (prob * (1 - prob)))
        info = (x * wgt[:, None]).T @ x
        try:
            step = np.linalg.solve(info + 1e-10 * np.eye(p), score)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def _default_init(dataset: SurveyDataset):
    x = np.column_stack([np.ones(dataset.n_individuals), dataset.covariates])
    beta = probit_regression(x, dataset.y_binary)
    dist = dataset.location_distances()
    max_d = float(dist.max())
    phi0 = 0.1 * max_d if max_d > 0 else 1.0
    return PrevalenceParams(alpha_t=float(beta[0]), beta_gamma_t=beta[1:],
                            sigma2_t=0.5, phi=phi0)


def fit_binomial(dataset: SurveyDataset, init: Optional[PrevalenceParams] = None,
                 settings: Optional[LatentIntegrationSettings] = None,
                 options: Optional[FitOptions] = None) -> FitResult:
    """Maximum-likelihood fit of the binomial probit geostatistical model.

    Quasi-Newton ascent on (alpha_t, beta_t..., log sigma2_t, log phi) with
    central finite-difference gradients (h = 1e-4 on the working scale) and a
    fixed seed, so importance-sampled objectives use common random numbers
    across iterations.  Degenerate outcomes (all 0 or all 1) return a
    boundary diagnostic with ``converged=False`` rather than raising.
    """
    settings = settings or LatentIntegrationSettings()
    options = options or FitOptions(grad_tol=1e-4)
    if dataset.y_binary is None:
        raise SchemaError("fit_binomial requires binary outcomes")

    yb = dataset.y_binary
    if np.all(yb == yb[0]):
        init = init or PrevalenceParams(alpha_t=float(ndtri(0.999 if yb[0] == 1 else 0.001)),
                                        beta_gamma_t=np.zeros(dataset.covariates.shape[1]),
                                        sigma2_t=0.5, phi=1.0)
        return FitResult(model="binomial", estimates=_binomial_estimates(init, dataset),
                         loglik=float("nan"), converged=False, iterations=0,
                         grad_norm=float("inf"), prevalence=init,
                         message="all binary outcomes identical: intercept not identifiable")

    init = init or _default_init(dataset)
    init.require_positive()
    p = dataset.covariates.shape[1]
    names = (["alpha_t"] + [f"beta_t_{nm}" for nm in dataset.covariate_names]
             + ["log_sigma2_t", "log_phi"])

    if settings.mode == "mcml":
        res, prevalence, grad_norm, bounds, hess, extra = mcml_fit(dataset, init, settings, options)
        result = FitResult(model="binomial", estimates=_binomial_estimates(prevalence, dataset),
                           loglik=ep_loglik(prevalence, dataset, settings),
                           converged=bool(res.success) and grad_norm <= options.grad_tol,
                           iterations=int(res.nit), grad_norm=grad_norm,
                           prevalence=prevalence, working_names=tuple(names),
                           message=str(res.message), extra=extra)
        if options.compute_info:
            result.obs_info = hess
            result.ci95 = _binomial_ci95(result, res.x, dataset)
        return result

    warm = {"mode": None, "sites": None}

    def unpack(w):
        return PrevalenceParams(alpha_t=float(w[0]), beta_gamma_t=w[1:1 + p],
                                sigma2_t=float(np.exp(w[1 + p])), phi=float(np.exp(w[2 + p])))

    def negloglik(w):
        prm = unpack(w)
        if settings.mode == "ghk":
            return -ghk_loglik(prm, dataset, settings)
        if settings.mode == "ep":
            value, sites = ep_loglik(prm, dataset, settings,
                                     warm_sites=warm.get("sites"), return_sites=True)
            warm["sites"] = sites
            return -value
        state = laplace_state(prm, dataset, settings, warm_start=warm["mode"])
        warm["mode"] = state.mode
        value = state.loglik
        if settings.mode == "laplace_is":
            value += _is_correction(prm, dataset, settings, state)
        return -value

    def fd_grad(w, h=1e-4):
        g = np.zeros_like(w)
        for j in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[j] += h
            wm[j] -= h
            g[j] = (negloglik(wp) - negloglik(wm)) / (2 * h)
        return g

    from .linear import projected_grad_norm

    max_d = max(float(dataset.location_distances().max()), 1e-12)
    bounds = ([(-40.0, 40.0)] * (1 + p)
              + [(-18.5, 13.8)]                                   # sigma2_t within ~1e-8..1e6
              + [(np.log(max_d) - 9.3, np.log(max_d) + 7.0)])
    w0 = np.concatenate([[init.alpha_t], init.beta_gamma_t,
                         [np.log(init.sigma2_t), np.log(init.phi)]])
    w0 = np.clip(w0, [b[0] for b in bounds], [b[1] for b in bounds])
    res = minimize(negloglik, w0, jac=fd_grad, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": options.max_iter, "ftol": 1e-12,
                            "gtol": 0.5 * options.grad_tol})
    grad_norm = projected_grad_norm(fd_grad(res.x), res.x, bounds)
    converged = bool(res.success) and grad_norm <= options.grad_tol
    prevalence = unpack(res.x)
    state = laplace_state(prevalence, dataset, settings, warm_start=warm["mode"])
    sqrt_w = np.sqrt(np.maximum(state.w, 0.0))
    shrink = solve_triangular(state.b_chol, sqrt_w[:, None] * state.cov_t,
                              lower=True, check_finite=False)
    latent_var = np.maximum(np.diag(state.cov_t) - np.sum(shrink * shrink, axis=0), 0.0)

    result = FitResult(model="binomial", estimates=_binomial_estimates(prevalence, dataset),
                       loglik=-float(res.fun), converged=converged,
                       iterations=int(res.nit), grad_norm=grad_norm,
                       prevalence=prevalence, working_names=tuple(names),
                       message=str(res.message),
                       extra={"laplace_mode": state.mode, "laplace_w": state.w,
                              "latent_mean": state.mode, "latent_var": latent_var})
    if options.compute_info:
        result.obs_info = _fd_hessian(negloglik, res.x)
        result.ci95 = _binomial_ci95(result, res.x, dataset)
    return result


def _binomial_estimates(prev: PrevalenceParams, dataset):
    out = {"alpha_t": prev.alpha_t, "sigma2_t": prev.sigma2_t, "phi": prev.phi}
    for nm, b in zip(dataset.covariate_names, prev.beta_gamma_t):
        out[f"beta_t_{nm}"] = float(b)
    return out


def _fd_hessian(fun, x, step=1e-4):
    """Central-difference Hessian of a scalar function (observed information
    of the negative log-likelihood)."""
    k = x.size
    h = step * (1.0 + np.abs(x))
    f0 = fun(x)
    hess = np.zeros((k, k))
    for i in range(k):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        hess[i, i] = (fun(xp) - 2 * f0 + fun(xm)) / (h[i] ** 2)
        for j in range(i + 1, k):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += h[[i, j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[[i, j]] -= h[[i, j]]
            hess[i, j] = hess[j, i] = (fun(xpp) - fun(xpm) - fun(xmp) + fun(xmm)) / (4 * h[i] * h[j])
    return hess


def _binomial_ci95(result: FitResult, w_hat, dataset):
    from .linear import working_covariance

    cov = working_covariance(result.obs_info)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, np.inf))
    z = 1.959963984540054
    ci = {}
    for j, name in enumerate(result.working_names):
        lo, hi = w_hat[j] - z * se[j], w_hat[j] + z * se[j]
        if name.startswith("log_"):
            ci[name[4:]] = (float(np.exp(lo)), float(np.exp(hi)))
        else:
            ci[name] = (float(lo), float(hi))
    return ci
