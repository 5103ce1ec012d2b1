"""Information lost by dichotomizing continuous outcomes.

Two instruments: the expected-Fisher-information ratio for the intercept in
the two-location case (exact enumeration over the four binary outcome
configurations, quasi-Monte-Carlo inner integrals), and the composite
likelihood dispersion (CLD) comparing pairwise-likelihood curvature of the
continuous and binary models at the linear-model estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .core import ModelParams, PrevalenceParams, SurveyDataset
from .errors import NumericalConditioningError, ParameterDomainError, SchemaError
from .numerics import (derive_rng, gauss_hermite_nodes, halton_normal,
                       log_probit_prob, probit_terms, safe_cholesky)


@dataclass(frozen=True)
class EfiSettings:
    """Controls for the expected-Fisher-information computations.

    With ``expectation='enumerate'`` the outer average over binary outcomes
    is exact (the m=2 outcome space has four points); ``'sample'`` reproduces
    the Monte-Carlo average over ``n_outcome_draws`` outcome draws instead.
    Inner integrals use scrambled Halton nodes, doubling the node count until
    the estimate moves by less than ``rel_tol`` relative.
    """

    n_outcome_draws: int = 10_000
    qmc_points: int = 4096
    rho_grid: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    alpha_grid: tuple = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0)
    tau2_grid: tuple = (0.5, 1.0, 2.0)
    sigma2: float = 1.0
    rel_tol: float = 1e-3
    max_doublings: int = 4
    expectation: str = "enumerate"
    seed: int = 0

    def __post_init__(self):
        if self.qmc_points < 1024:
            raise ParameterDomainError("qmc_points must be at least 1024")
        if any(r < 0 or r >= 1 for r in self.rho_grid):
            raise ParameterDomainError("rho_grid values must lie in [0, 1)")
        if self.expectation not in ("enumerate", "sample"):
            raise ParameterDomainError(f"unknown expectation mode {self.expectation!r}")


@dataclass(frozen=True)
class InfoLossReport:
    """EFI pair and loss ratio at one (alpha_t, rho, tau2) grid point."""

    alpha_t: float
    rho: float
    tau2: float
    i_y: float
    i_yt: float
    r: float


@dataclass(frozen=True)
class CldReport:
    logdet_continuous: float
    logdet_binary: float
    cld: float


# ---------------------------------------------------------------------------
# Expected Fisher information
# ---------------------------------------------------------------------------

def efi_linear(dataset: SurveyDataset, params: ModelParams):
    """EFI for the prevalence intercept under the linear model: tau2 1' Sigma_Y^-1 1."""
    u = dataset.individual_distances()
    cov = params.sigma2 * np.exp(-u / params.phi) + params.tau2 * np.eye(dataset.n_individuals)
    l_chol, _ = safe_cholesky(cov, what="Sigma_Y")
    from .numerics import chol_solve

    one = np.ones(dataset.n_individuals)
    return float(params.tau2 * (one @ chol_solve(l_chol, one)))


def _efi_linear_two_points(tau2, rho, sigma2=1.0):
    # closed 2x2 form: 1' Sigma_Y^-1 1 = 2 / (sigma2 + tau2 + sigma2*rho)
    return 2.0 * tau2 / (sigma2 + tau2 + sigma2 * rho)


def _config_neg_d2(alpha_t, s_nodes, y_config):
    """-d^2 log L / d alpha_t^2 and L for one outcome configuration.

    ``s_nodes`` holds latent draws (n, 2); the integrals over the latent pair
    are node averages, and the curvature identity is
    d2 logL = [E w (g'^2 + g'')] / L - (E w g' / L)^2 with w = exp(g).
    """
    eta = alpha_t + s_nodes
    lp, dg, d2g = probit_terms(eta, y_config[None, :])
    g = lp.sum(axis=1)
    dg_tot = dg.sum(axis=1)
    d2g_tot = d2g.sum(axis=1)
    w = np.exp(g)
    lik = float(np.mean(w))
    a = float(np.mean(w * dg_tot))
    b = float(np.mean(w * (dg_tot * dg_tot + d2g_tot)))
    if not np.isfinite(lik) or lik <= 0:
        raise NumericalConditioningError("inner EFI integral is non-finite")
    d2_loglik = b / lik - (a / lik) ** 2
    return -d2_loglik, lik


def _latent_nodes(sigma2_t, rho, n, seed):
    if sigma2_t == 0:
        return np.zeros((1, 2))
    cov = sigma2_t * np.array([[1.0, rho], [rho, 1.0]])
    l_chol, _ = safe_cholesky(cov, what="two-point latent covariance")
    z = halton_normal(n, 2, seed)
    return z @ l_chol.T


_CONFIGS = [np.array(c, dtype=float) for c in ((0, 0), (0, 1), (1, 0), (1, 1))]


def _efi_binary_once(alpha_t, sigma2_t, rho, n_nodes, settings):
    s_nodes = _latent_nodes(sigma2_t, rho, n_nodes, derive_rng(settings.seed, 3))
    vals, liks = [], []
    for cfg in _CONFIGS:
        neg_d2, lik = _config_neg_d2(alpha_t, s_nodes, cfg)
        vals.append(neg_d2)
        liks.append(lik)
    vals, liks = np.array(vals), np.array(liks)
    if settings.expectation == "enumerate":
        return float(np.sum(liks * vals))
    rng = derive_rng(settings.seed, 4)
    draws = rng.choice(4, size=settings.n_outcome_draws, p=liks / liks.sum())
    return float(np.mean(vals[draws]))


def efi_binary_two_points(alpha_t, sigma2_t, rho, settings: Optional[EfiSettings] = None):
    """EFI for the intercept from two dichotomized observations.

    Exact expectation over the four outcome configurations (or a sampled
    average when configured), with adaptively refined quasi-Monte-Carlo
    evaluation of the inner two-dimensional integrals.
    """
    settings = settings or EfiSettings()
    if sigma2_t < 0:
        raise ParameterDomainError(f"sigma2_t must be non-negative, got {sigma2_t}")
    if not (0 <= rho < 1):
        raise ParameterDomainError(f"rho must lie in [0, 1), got {rho}")
    if sigma2_t == 0:
        # latent degenerates to zero: information is per-observation and exact
        return 2.0 * _pointwise_binary_info(alpha_t)
    n = settings.qmc_points
    value = _efi_binary_once(alpha_t, sigma2_t, rho, n, settings)
    for _ in range(settings.max_doublings):
        n *= 2
        refined = _efi_binary_once(alpha_t, sigma2_t, rho, n, settings)
        if abs(refined - value) <= settings.rel_tol * abs(refined):
            return refined
        value = refined
    return value


def _pointwise_binary_info(alpha_t):
    p = norm.cdf(alpha_t)
    f = norm.pdf(alpha_t)
    return float(f * f / (p * (1.0 - p)))


def loss_ratio(i_y, i_yt):
    """Relative information loss R = 1 - I_Yt / I_Y."""
    if not np.isfinite(i_y) or i_y <= 0:
        raise ParameterDomainError(f"continuous-model information must be positive, got {i_y}")
    return 1.0 - i_yt / i_y


def loss_no_spatial(alpha_t):
    """Closed-form loss when the spatial field is absent, via Phi' and Phi''.

    Built from the per-configuration second derivatives of the Bernoulli
    probit log-likelihood: the positive configuration contributes
    (Phi'^2 - Phi'' Phi)/Phi and the negative one (Phi'' (1-Phi) + Phi'^2)/(1-Phi);
    their sum (the expected information) simplifies to Phi'^2/(Phi (1-Phi)),
    so the loss floors at 1 - 2/pi and does not depend on the sample size.
    """
    a = float(alpha_t)
    if not np.isfinite(a):
        raise ParameterDomainError(f"alpha_t must be finite, got {a}")
    p = norm.cdf(a)
    d1 = norm.pdf(a)       # Phi'
    d2 = -a * d1           # Phi''
    info_pos = (d1 * d1 - d2 * p) / p
    info_neg = (d2 * (1.0 - p) + d1 * d1) / (1.0 - p)
    return float(1.0 - (info_pos + info_neg))


def efi_curve(settings: Optional[EfiSettings] = None):
    """Sweep the (alpha_t, rho, tau2) grid; one report row per cell."""
    settings = settings or EfiSettings()
    rows = []
    for tau2 in settings.tau2_grid:
        sigma2_t = settings.sigma2 / tau2
        for rho in settings.rho_grid:
            i_y = _efi_linear_two_points(tau2, rho, settings.sigma2)
            for alpha_t in settings.alpha_grid:
                i_yt = efi_binary_two_points(alpha_t, sigma2_t, rho, settings)
                rows.append(InfoLossReport(alpha_t=float(alpha_t), rho=float(rho),
                                           tau2=float(tau2), i_y=i_y, i_yt=i_yt,
                                           r=loss_ratio(i_y, i_yt)))
    return rows


# ---------------------------------------------------------------------------
# Pairwise composite likelihood and CLD
# ---------------------------------------------------------------------------

def _pair_indices(m):
    h, k = np.triu_indices(m, k=1)
    return h, k


def pairwise_composite_loglik(params: PrevalenceParams, dataset: SurveyDataset,
                              quadrature_order: int = 20):
    """Sum over location pairs of log f(y_h, y_k): each term is a bivariate
    latent integral evaluated by tensor Gauss-Hermite after whitening."""
    if dataset.y_binary is None:
        raise SchemaError("binary outcomes are required")
    if dataset.n_locations < 2:
        raise SchemaError("the composite likelihood needs at least two locations")
    mu = params.alpha_t + dataset.covariates @ params.beta_gamma_t
    dist = dataset.location_distances()
    rho = np.exp(-dist / params.phi)
    h_idx, k_idx = _pair_indices(dataset.n_locations)

    if params.sigma2_t == 0:
        lp = log_probit_prob(mu, dataset.y_binary)
        per_loc = np.bincount(dataset.loc_index, weights=lp, minlength=dataset.n_locations)
        return float(np.sum(per_loc[h_idx] + per_loc[k_idx]))

    nodes, log_w = gauss_hermite_nodes(quadrature_order, 2)
    sd = np.sqrt(params.sigma2_t)
    if np.all(dataset.n_per_location == 1):
        return _composite_fast_single(mu, dataset.y_binary, dataset.loc_index, rho,
                                      h_idx, k_idx, sd, nodes, log_w)

    total = 0.0
    by_loc = [np.flatnonzero(dataset.loc_index == i) for i in range(dataset.n_locations)]
    for h, k in zip(h_idx, k_idx):
        r = rho[h, k]
        s_h = sd * nodes[:, 0]
        s_k = sd * (r * nodes[:, 0] + np.sqrt(max(1.0 - r * r, 0.0)) * nodes[:, 1])
        g = np.zeros(nodes.shape[0])
        for j in by_loc[h]:
            g += log_probit_prob(mu[j] + s_h, dataset.y_binary[j])
        for j in by_loc[k]:
            g += log_probit_prob(mu[j] + s_k, dataset.y_binary[j])
        total += float(logsumexp(log_w + g))
    return total


def _composite_fast_single(mu, yb, loc_index, rho, h_idx, k_idx, sd, nodes, log_w,
                           chunk=4096):
    """Vectorized pair terms for the one-individual-per-location layout."""
    mu_loc = np.empty(rho.shape[0])
    y_loc = np.empty(rho.shape[0])
    mu_loc[loc_index] = mu
    y_loc[loc_index] = yb
    total = 0.0
    s1 = sd * nodes[:, 0]
    for start in range(0, h_idx.size, chunk):
        hh = h_idx[start:start + chunk]
        kk = k_idx[start:start + chunk]
        r = rho[hh, kk][:, None]
        s_h = s1[None, :]
        s_k = sd * (r * nodes[None, :, 0] + np.sqrt(np.maximum(1.0 - r * r, 0.0)) * nodes[None, :, 1])
        g = (log_probit_prob(mu_loc[hh][:, None] + s_h, y_loc[hh][:, None])
             + log_probit_prob(mu_loc[kk][:, None] + s_k, y_loc[kk][:, None]))
        total += float(np.sum(logsumexp(log_w[None, :] + g, axis=1)))
    return total


def composite_hessian_binary(theta_lm: PrevalenceParams, dataset: SurveyDataset,
                             quadrature_order: int = 20, step_scale: float = 1e-4):
    """Central-difference Hessian of the binary composite log-likelihood over
    the regression block, covariance parameters plugged in."""
    theta0 = np.concatenate([[theta_lm.alpha_t], theta_lm.beta_gamma_t])
    p = theta0.size

    def value(theta):
        prm = PrevalenceParams(alpha_t=float(theta[0]), beta_gamma_t=theta[1:],
                               sigma2_t=theta_lm.sigma2_t, phi=theta_lm.phi)
        return pairwise_composite_loglik(prm, dataset, quadrature_order)

    h = step_scale * (1.0 + np.abs(theta0))
    f0 = value(theta0)
    hess = np.zeros((p, p))
    for i in range(p):
        tp, tm = theta0.copy(), theta0.copy()
        tp[i] += h[i]
        tm[i] -= h[i]
        hess[i, i] = (value(tp) - 2 * f0 + value(tm)) / (h[i] ** 2)
        for j in range(i + 1, p):
            tpp, tpm, tmp, tmm = theta0.copy(), theta0.copy(), theta0.copy(), theta0.copy()
            tpp[[i, j]] += h[[i, j]]
            tpm[i] += h[i]
            tpm[j] -= h[j]
            tmp[i] -= h[i]
            tmp[j] += h[j]
            tmm[[i, j]] -= h[[i, j]]
            hess[i, j] = hess[j, i] = (value(tpp) - value(tpm) - value(tmp) + value(tmm)) / (4 * h[i] * h[j])
    return hess


def composite_hessian_continuous_cov(tau2, design_blocks, cov_blocks):
    """Closed-form continuous composite Hessian -tau2 * sum_pairs D' S^-1 D.

    ``design_blocks``/``cov_blocks`` hold, per pair, the stacked design rows
    of the two locations and the matching pair covariance.
    """
    p = design_blocks[0].shape[1]
    total = np.zeros((p, p))
    for d_blk, s_blk in zip(design_blocks, cov_blocks):
        l_chol, _ = safe_cholesky(s_blk, what="pair covariance")
        from .numerics import chol_solve

        total += d_blk.T @ chol_solve(l_chol, d_blk)
    return -tau2 * total


def composite_hessian_continuous(theta_lm: PrevalenceParams, dataset: SurveyDataset):
    """Continuous-model composite Hessian over the prevalence regression block.

    Expressed in prevalence-scale covariance units, where the pair covariance
    is sigma2_t * rho + I and the tau2 factors cancel exactly.
    """
    design = np.column_stack([np.ones(dataset.n_individuals), dataset.covariates])
    dist = dataset.location_distances()
    rho = np.exp(-dist / theta_lm.phi)
    h_idx, k_idx = _pair_indices(dataset.n_locations)
    by_loc = [np.flatnonzero(dataset.loc_index == i) for i in range(dataset.n_locations)]
    design_blocks, cov_blocks = [], []
    for h, k in zip(h_idx, k_idx):
        rows = np.concatenate([by_loc[h], by_loc[k]])
        d_blk = design[rows]
        n_h, n_k = by_loc[h].size, by_loc[k].size
        corr = np.ones((n_h + n_k, n_h + n_k))
        corr[:n_h, n_h:] = rho[h, k]
        corr[n_h:, :n_h] = rho[h, k]
        cov_blocks.append(theta_lm.sigma2_t * corr + np.eye(n_h + n_k))
        design_blocks.append(d_blk)
    return composite_hessian_continuous_cov(1.0, design_blocks, cov_blocks)


def cld(theta_lm: PrevalenceParams, dataset_binary: SurveyDataset,
        dataset_continuous_design: Optional[SurveyDataset] = None,
        quadrature_order: int = 20) -> CldReport:
    """Composite-likelihood dispersion at the linear-model estimates.

    log det(-H_continuous) - log det(-H_binary); positive values mean the
    composite likelihood is more dispersed for the binary data.  Computable
    without fitting any binomial model.
    """
    ds_cont = dataset_continuous_design or dataset_binary
    h_y = composite_hessian_continuous(theta_lm, ds_cont)
    h_yt = composite_hessian_binary(theta_lm, dataset_binary, quadrature_order)
    return cld_from_hessians(h_y, h_yt)


def cld_from_hessians(h_continuous, h_binary) -> CldReport:
    logdets = []
    for name, h in (("continuous", h_continuous), ("binary", h_binary)):
        neg = -np.asarray(h)
        try:
            l_chol = np.linalg.cholesky(neg)
        except np.linalg.LinAlgError:
            raise NumericalConditioningError(
                f"the {name} composite Hessian is not negative definite; CLD is undefined"
            )
        logdets.append(2.0 * float(np.sum(np.log(np.diag(l_chol)))))
    return CldReport(logdet_continuous=logdets[0], logdet_binary=logdets[1],
                     cld=logdets[0] - logdets[1])
