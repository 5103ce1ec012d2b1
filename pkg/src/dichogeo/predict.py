"""Plug-in spatial prediction of prevalence surfaces with exceedance maps.

Both fitted models funnel into the same machinery: obtain the conditional
Gaussian of the prevalence-scale latent field at the grid, draw from it via
a triangular factor (chunked over grid tiles), push the draws through the
probit mean, and summarize pointwise means and exceedance probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import ndtr

from .binomial import LatentIntegrationSettings, laplace_state
from .core import ModelParams, PrevalenceParams, SurveyDataset, as_coords
from .errors import ParameterDomainError, SchemaError
from .linear import FitResult, _design
from .numerics import chol_solve, derive_rng, safe_cholesky

DEFAULT_TILE = 2500


@dataclass
class PredictionGrid:
    """Prevalence summaries at grid locations for one covariate profile."""

    coords: np.ndarray
    covariate_profile: np.ndarray
    prevalence_mean: np.ndarray
    samples: np.ndarray                 # (n_cond_samples, n_points) prevalence draws
    n_cond_samples: int
    exceedance: Optional[np.ndarray] = None
    exceedance_threshold: Optional[float] = None


def latent_conditional_linear(params: ModelParams, dataset: SurveyDataset, grid_coords):
    """Kriging conditional of the continuous-scale field S at the grid.

    Plug-in Gaussian conditioning of [S_grid; y]; returns (mean, cov) in the
    units of the outcome.
    """
    if dataset.y is None:
        raise SchemaError("the linear conditional needs continuous outcomes")
    grid = as_coords(grid_coords)
    data_coords = dataset.coords
    d = _design(dataset)
    theta = np.concatenate([[params.alpha], params.beta_gamma])
    resid = dataset.y - d @ theta

    u_dd = dataset.individual_distances()
    cov_dd = params.sigma2 * np.exp(-u_dd / params.phi) + params.tau2 * np.eye(dataset.n_individuals)
    l_chol, _ = safe_cholesky(cov_dd, what="Sigma_Y")

    u_gd = cdist(grid, data_coords)[:, dataset.loc_index]
    cov_gd = params.sigma2 * np.exp(-u_gd / params.phi)
    u_gg = cdist(grid, grid)
    cov_gg = params.sigma2 * np.exp(-u_gg / params.phi)

    solved = chol_solve(l_chol, np.column_stack([resid, cov_gd.T]))
    mean = cov_gd @ solved[:, 0]
    cov = cov_gg - cov_gd @ solved[:, 1:]
    return mean, cov


def latent_conditional_binomial(params: PrevalenceParams, dataset: SurveyDataset,
                                grid_coords, settings: Optional[LatentIntegrationSettings] = None):
    """Conditional of the prevalence-scale field given binary data.

    Conditions on the Laplace Gaussian of the latent field at the data
    locations (mode and curvature), then extends to the grid under the prior.
    """
    settings = settings or LatentIntegrationSettings()
    grid = as_coords(grid_coords)
    state = laplace_state(params, dataset, settings)
    loc_coords = dataset.coords

    u_gd = cdist(grid, loc_coords)
    k_gd = params.sigma2_t * np.exp(-u_gd / params.phi)
    u_gg = cdist(grid, grid)
    k_gg = params.sigma2_t * np.exp(-u_gg / params.phi)

    # At the mode, cov_t a = mode with a the likelihood gradient, so a is the
    # kriging weight vector; the predictive shrinkage (K + W^-1)^-1 is
    # computed stably as sqrtW B^-1 sqrtW.
    mean = k_gd @ state.grad_terms
    sqrt_w = np.sqrt(np.maximum(state.w, 0.0))
    v = solve_triangular(state.b_chol, sqrt_w[:, None] * k_gd.T, lower=True, check_finite=False)
    cov = k_gg - v.T @ v
    return mean, cov


def conditional_latent(fit: FitResult, dataset: SurveyDataset, grid_coords,
                       settings: Optional[LatentIntegrationSettings] = None):
    """Dispatch to the model-appropriate latent conditional.

    Linear fits return the field on the outcome scale; binomial fits on the
    prevalence scale (see :func:`predict_prevalence` for the bridge).
    """
    if not fit.converged:
        raise ParameterDomainError("prediction requires a converged fit")
    if fit.model == "linear":
        return latent_conditional_linear(fit.params, dataset, grid_coords)
    if fit.model == "binomial":
        return latent_conditional_binomial(fit.prevalence, dataset, grid_coords, settings)
    raise ParameterDomainError(f"unknown model kind {fit.model!r}")


def prevalence_from_conditional(mean_t, cov_t, mu_profile, n_cond_samples, seed,
                                exceedance_threshold=None, tile=DEFAULT_TILE):
    """Shared sampling core: draw the latent field, map through the probit mean.

    Both model paths call this with a prevalence-scale conditional Gaussian,
    so they agree exactly when fed identical inputs.  Sampling is chunked
    over grid tiles (stream (seed, tile_index)) to bound memory.
    """
    mean_t = np.asarray(mean_t, dtype=float)
    n_pts = mean_t.size
    prev_mean = np.empty(n_pts)
    exceed = np.empty(n_pts) if exceedance_threshold is not None else None
    samples_out = np.empty((n_cond_samples, n_pts))
    for t_idx, start in enumerate(range(0, n_pts, tile)):
        stop = min(start + tile, n_pts)
        sub_cov = np.asarray(cov_t)[start:stop, start:stop]
        l_chol, _ = safe_cholesky(sub_cov + 1e-12 * np.mean(np.diag(sub_cov) + 1e-300) * np.eye(stop - start),
                                  what="conditional covariance tile")
        z = derive_rng(seed, t_idx).standard_normal((n_cond_samples, stop - start))
        draws = mean_t[start:stop][None, :] + z @ l_chol.T
        prev = ndtr(mu_profile + draws)
        samples_out[:, start:stop] = prev
        prev_mean[start:stop] = prev.mean(axis=0)
        if exceed is not None:
            exceed[start:stop] = np.mean(prev > exceedance_threshold, axis=0)
    return prev_mean, exceed, samples_out


def predict_prevalence(fit: FitResult, dataset: SurveyDataset, grid_coords, profile,
                       n_cond_samples: int = 2000, seed: int = 0,
                       exceedance_threshold: Optional[float] = None,
                       settings: Optional[LatentIntegrationSettings] = None,
                       tile: int = DEFAULT_TILE) -> PredictionGrid:
    """Pointwise prevalence mean (and optional exceedance) for one profile.

    ``profile`` is a covariate row matching the fitted design (the threshold
    column included when the fit used one).  Linear-model estimates pass
    through the parameter bridge first.
    """
    profile = np.asarray(profile, dtype=float).ravel()
    prev_params = fit.prevalence
    if prev_params is None:
        raise SchemaError("the fit carries no prevalence-scale view; supply a threshold when fitting")
    if profile.size != prev_params.beta_gamma_t.size:
        raise SchemaError(
            f"profile length {profile.size} does not match the fitted design ({prev_params.beta_gamma_t.size})"
        )
    mu_profile = float(prev_params.alpha_t + prev_params.beta_gamma_t @ profile)

    mean, cov = conditional_latent(fit, dataset, grid_coords, settings)
    if fit.model == "linear":
        tau = np.sqrt(fit.params.tau2)
        mean, cov = -mean / tau, cov / fit.params.tau2

    prev_mean, exceed, samples = prevalence_from_conditional(
        mean, cov, mu_profile, n_cond_samples, seed, exceedance_threshold, tile)
    return PredictionGrid(coords=as_coords(grid_coords), covariate_profile=profile,
                          prevalence_mean=prev_mean, samples=samples,
                          n_cond_samples=n_cond_samples, exceedance=exceed,
                          exceedance_threshold=exceedance_threshold)


def exceedance_prob(samples, threshold):
    """Per-point fraction of prevalence draws above the policy threshold."""
    if not (0.0 < threshold < 1.0):
        raise ParameterDomainError(f"exceedance threshold must lie in (0, 1), got {threshold}")
    return np.mean(np.asarray(samples) > threshold, axis=0)
