"""Exact maximum likelihood for the linear geostatistical model.

The Gaussian log-likelihood is evaluated in closed form with its analytic
gradient on the working scale (alpha, beta..., log sigma2, log tau2, log phi).
Fitting profiles the regression block out exactly (a GLS step per covariance
evaluation) and runs a quasi-Newton ascent over the three log-variance/scale
parameters; estimates are translated to the prevalence scale through the
parameter bridge, with delta-method confidence intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .core import (ModelParams, PrevalenceParams, SurveyDataset,
                   to_prevalence_scale, to_prevalence_scale_varying)
from .errors import ParameterDomainError, SchemaError
from .numerics import chol_logdet, chol_solve, safe_cholesky

_LOG_2PI = float(np.log(2.0 * np.pi))

WORKING_COV_NAMES = ("log_sigma2", "log_tau2", "log_phi")


@dataclass
class FitOptions:
    """Knobs for both fitters; defaults match the documented policy."""

    max_iter: int = 500
    grad_tol: float = 1e-6
    threshold: Optional[float] = None     # scalar c for the prevalence view
    compute_info: bool = True             # observed information + CIs
    fix_phi: Optional[float] = None       # hold phi fixed (degenerate geometries)
    n_restarts: int = 0                   # retries from perturbed inits when the
                                          # optimizer lands on a degenerate ridge
    verbose: bool = False


@dataclass
class FitResult:
    """Point estimates plus the usual diagnostics.

    ``estimates`` is a flat name -> value map covering both scales where
    available; ``obs_info`` is the negative Hessian at the optimum on the
    unconstrained working scale (None when disabled for speed).
    """

    model: str
    estimates: dict
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float
    params: Optional[ModelParams] = None
    prevalence: Optional[PrevalenceParams] = None
    obs_info: Optional[np.ndarray] = None
    working_names: tuple = ()
    ci95: dict = field(default_factory=dict)
    threshold: Optional[float] = None
    message: str = ""
    extra: dict = field(default_factory=dict)


def _design(dataset: SurveyDataset):
    return np.column_stack([np.ones(dataset.n_individuals), dataset.covariates])


def _cov_pieces(dataset: SurveyDataset, sigma2, tau2, phi):
    u = dataset.individual_distances()
    corr = np.exp(-u / phi)
    cov = sigma2 * corr + tau2 * np.eye(dataset.n_individuals)
    return u, corr, cov


def gaussian_loglik(params: ModelParams, dataset: SurveyDataset):
    """Log density of the continuous outcomes and its analytic gradient.

    Returns ``(value, gradient)`` with the gradient taken with respect to
    (alpha, beta..., log sigma2, log tau2, log phi).
    """
    if dataset.y is None:
        raise SchemaError("gaussian_loglik requires continuous outcomes")
    if params.beta_gamma.size != dataset.covariates.shape[1]:
        raise SchemaError("parameter vector does not match the design")
    params.require_positive()

    d = _design(dataset)
    theta = np.concatenate([[params.alpha], params.beta_gamma])
    r = dataset.y - d @ theta
    u, corr, cov = _cov_pieces(dataset, params.sigma2, params.tau2, params.phi)
    n = dataset.n_individuals

    l_chol, _ = safe_cholesky(cov, what="Sigma_Y")
    alpha_vec = chol_solve(l_chol, r)
    value = -0.5 * (n * _LOG_2PI + chol_logdet(l_chol) + float(r @ alpha_vec))

    grad_mean = d.T @ alpha_vec
    cov_inv = chol_solve(l_chol, np.eye(n))

    d_sigma = params.sigma2 * corr                # d cov / d log sigma2
    d_tau = params.tau2 * np.eye(n)               # d cov / d log tau2
    d_phi = params.sigma2 * corr * (u / params.phi)  # d cov / d log phi

    def cov_grad(dmat):
        quad = float(alpha_vec @ dmat @ alpha_vec)
        tr = float(np.sum(cov_inv * dmat))
        return 0.5 * (quad - tr)

    grad = np.concatenate([grad_mean, [cov_grad(d_sigma), cov_grad(d_tau), cov_grad(d_phi)]])
    return value, grad


def _profiled_negloglik(psi, dataset, d, u, fix_phi):
    """Negative profiled log-likelihood over (log sigma2, log tau2[, log phi])."""
    sigma2, tau2 = np.exp(psi[0]), np.exp(psi[1])
    phi = fix_phi if fix_phi is not None else np.exp(psi[2])
    n = dataset.n_individuals
    corr = np.exp(-u / phi)
    cov = sigma2 * corr + tau2 * np.eye(n)
    l_chol, _ = safe_cholesky(cov, what="Sigma_Y")

    # exact GLS step for the regression block
    wd = solve_triangular(l_chol, d, lower=True, check_finite=False)
    wy = solve_triangular(l_chol, dataset.y, lower=True, check_finite=False)
    theta, *_ = np.linalg.lstsq(wd, wy, rcond=None)
    r = dataset.y - d @ theta
    alpha_vec = chol_solve(l_chol, r)
    value = -0.5 * (n * _LOG_2PI + chol_logdet(l_chol) + float(r @ alpha_vec))

    cov_inv = chol_solve(l_chol, np.eye(n))

    def cov_grad(dmat):
        return 0.5 * (float(alpha_vec @ dmat @ alpha_vec) - float(np.sum(cov_inv * dmat)))

    grads = [cov_grad(sigma2 * corr), cov_grad(tau2 * np.eye(n))]
    if fix_phi is None:
        grads.append(cov_grad(sigma2 * corr * (u / phi)))
    return -value, -np.array(grads), theta


def projected_grad_norm(grad, x, bounds, tol=1e-10):
    """Max-norm of the gradient of a minimized objective, projected onto the
    feasible box (components pointing out of an active bound are dropped)."""
    pg = np.array(grad, dtype=float)
    for j, (lo, hi) in enumerate(bounds):
        if x[j] <= lo + tol:
            pg[j] = min(pg[j], 0.0)
        elif x[j] >= hi - tol:
            pg[j] = max(pg[j], 0.0)
    return float(np.max(np.abs(pg)))


def _default_init(dataset: SurveyDataset):
    d = _design(dataset)
    theta, *_ = np.linalg.lstsq(d, dataset.y, rcond=None)
    resid = dataset.y - d @ theta
    dof = max(dataset.n_individuals - d.shape[1], 1)
    s2 = max(float(resid @ resid) / dof, 1e-8)
    dist = dataset.location_distances()
    max_d = float(dist.max())
    phi0 = 0.1 * max_d if max_d > 0 else 1.0
    return ModelParams(alpha=float(theta[0]), beta_gamma=theta[1:],
                       sigma2=0.5 * s2, tau2=0.5 * s2, phi=phi0)


def fit_linear(dataset: SurveyDataset, init: Optional[ModelParams] = None,
               options: Optional[FitOptions] = None) -> FitResult:
    """Maximum-likelihood fit of the linear geostatistical model.

    Quasi-Newton ascent on the profiled likelihood over the log covariance
    parameters; never raises on non-convergence, returning a diagnostic
    result with ``converged=False`` instead.  With ``n_restarts > 0``,
    solutions trapped on a degenerate ridge (nugget at zero, or phi below
    the grid resolution where the field mimics white noise) trigger retries
    from perturbed starting values, keeping the best non-degenerate mode.
    """
    options = options or FitOptions()
    if dataset.y is None:
        raise SchemaError("fit_linear requires continuous outcomes")
    p_reg = dataset.covariates.shape[1] + 1
    if dataset.n_individuals < p_reg + 3:
        raise SchemaError(
            f"need at least {p_reg + 3} observations to fit {p_reg} regression and 3 covariance parameters"
        )
    init = init or _default_init(dataset)
    init.require_positive()
    if init.beta_gamma.size != dataset.covariates.shape[1]:
        raise SchemaError("init parameter vector does not match the design")

    result = _fit_linear_once(dataset, init, options)
    if options.n_restarts > 0 and _is_degenerate(result, dataset):
        candidates = [result]
        s2 = init.sigma2 + init.tau2
        alts = [(0.25, 2.0), (0.75, 0.5), (0.5, 4.0)][: options.n_restarts]
        for frac, phi_mult in alts:
            alt = ModelParams(alpha=init.alpha, beta_gamma=init.beta_gamma,
                              sigma2=max((1 - frac) * s2, 1e-8), tau2=max(frac * s2, 1e-8),
                              phi=init.phi * phi_mult)
            candidates.append(_fit_linear_once(dataset, alt, options))
        sane = [r for r in candidates if not _is_degenerate(r, dataset)]
        pool = sane or candidates
        result = max(pool, key=lambda r: r.loglik)
    return result


def _is_degenerate(result: FitResult, dataset: SurveyDataset):
    if not result.converged:
        return True
    var_y = max(float(np.var(dataset.y)), 1e-300)
    dist = dataset.location_distances()
    pos = dist[dist > 0]
    d_min = float(pos.min()) if pos.size else 0.0
    return (result.params.tau2 < 1e-3 * var_y
            or (d_min > 0 and result.params.phi < d_min / 3.0))


def _fit_linear_once(dataset: SurveyDataset, init: ModelParams,
                     options: FitOptions) -> FitResult:
    d = _design(dataset)
    u = dataset.individual_distances()
    fix_phi = options.fix_phi
    psi0 = [np.log(init.sigma2), np.log(init.tau2)]
    var_y = max(float(np.var(dataset.y)), 1e-12)
    max_d = max(float(u.max()), 1e-12)
    bounds = [(np.log(var_y) - 18.5, np.log(var_y) + 9.3)] * 2  # variance within ~1e-8x..1e4x of var(y)
    if fix_phi is None:
        psi0.append(np.log(init.phi))
        bounds.append((np.log(max_d) - 9.3, np.log(max_d) + 7.0))
    psi0 = np.clip(np.array(psi0), [b[0] for b in bounds], [b[1] for b in bounds])

    def objective(psi):
        f, g, _ = _profiled_negloglik(psi, dataset, d, u, fix_phi)
        return f, g

    res = minimize(objective, psi0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": options.max_iter, "ftol": 1e-13,
                            "gtol": options.grad_tol})
    neg_f, grad_final, theta_hat = _profiled_negloglik(res.x, dataset, d, u, fix_phi)
    grad_norm = projected_grad_norm(grad_final, res.x, bounds)
    at_bound = [nm for nm, xj, (lo, hi) in zip(WORKING_COV_NAMES, res.x, bounds)
                if xj <= lo + 1e-6 or xj >= hi - 1e-6]
    converged = bool(res.success) and grad_norm <= options.grad_tol and not at_bound
    message = str(res.message)
    if at_bound:
        # a variance/scale pinned at its box edge: the ratio-based prevalence
        # view is unreliable there, so report a boundary diagnostic
        message = f"boundary solution in {', '.join(at_bound)}; {message}"

    sigma2, tau2 = float(np.exp(res.x[0])), float(np.exp(res.x[1]))
    phi = float(fix_phi) if fix_phi is not None else float(np.exp(res.x[2]))
    params = ModelParams(alpha=float(theta_hat[0]), beta_gamma=theta_hat[1:],
                         sigma2=sigma2, tau2=tau2, phi=phi)
    loglik = -float(res.fun)

    c = _resolve_threshold(dataset, options)
    varying = c is None and dataset.thresholds is not None
    if varying:
        prevalence = to_prevalence_scale_varying(params)
    elif c is not None:
        prevalence = to_prevalence_scale(params, c)
    else:
        prevalence = None

    names = ["alpha"] + [f"beta_{nm}" for nm in dataset.covariate_names] + list(WORKING_COV_NAMES)
    estimates = {
        "alpha": params.alpha,
        **{f"beta_{nm}": float(b) for nm, b in zip(dataset.covariate_names, params.beta_gamma)},
        "sigma2": sigma2, "tau2": tau2, "phi": phi,
    }
    if prevalence is not None:
        estimates.update(_prevalence_estimates(prevalence, dataset, varying))

    result = FitResult(model="linear", estimates=estimates, loglik=loglik,
                       converged=converged, iterations=int(res.nit),
                       grad_norm=grad_norm, params=params, prevalence=prevalence,
                       working_names=tuple(names), threshold=c,
                       message=message)
    if options.compute_info:
        w_hat = np.concatenate([theta_hat, [np.log(sigma2), np.log(tau2), np.log(phi)]])
        result.obs_info = _observed_information(w_hat, dataset)
        result.ci95 = _linear_ci95(result, w_hat, dataset, c, varying)
    return result


def _resolve_threshold(dataset, options):
    if options.threshold is not None:
        return float(options.threshold)
    if dataset.thresholds is not None:
        vals = np.unique(dataset.thresholds)
        if vals.size == 1:
            return float(vals[0])
    return None


def _full_working_gradient(w, dataset):
    p = dataset.covariates.shape[1]
    params = ModelParams(alpha=w[0], beta_gamma=w[1:1 + p],
                         sigma2=np.exp(w[1 + p]), tau2=np.exp(w[2 + p]), phi=np.exp(w[3 + p]))
    return gaussian_loglik(params, dataset)[1]


def _observed_information(w_hat, dataset, step=1e-5):
    """Negative Hessian on the working scale by central differences of the
    analytic gradient."""
    k = w_hat.size
    hess = np.zeros((k, k))
    for j in range(k):
        h = step * (1.0 + abs(w_hat[j]))
        wp, wm = w_hat.copy(), w_hat.copy()
        wp[j] += h
        wm[j] -= h
        hess[:, j] = (_full_working_gradient(wp, dataset) - _full_working_gradient(wm, dataset)) / (2 * h)
    hess = 0.5 * (hess + hess.T)
    return -hess


def working_covariance(obs_info):
    """Covariance of the working-scale estimates from the observed information."""
    try:
        return np.linalg.inv(obs_info)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(obs_info)


def _linear_ci95(result: FitResult, w_hat, dataset, c, varying):
    """Wald intervals on the working scale, back-transformed; the prevalence
    block uses the delta method on (alpha, beta, log sigma2, log tau2)."""
    cov = working_covariance(result.obs_info)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, np.inf))
    z = 1.959963984540054
    p = dataset.covariates.shape[1]
    names = result.working_names
    ci = {}
    for j, name in enumerate(names):
        lo, hi = w_hat[j] - z * se[j], w_hat[j] + z * se[j]
        if name.startswith("log_"):
            ci[name[4:]] = (float(np.exp(lo)), float(np.exp(hi)))
        else:
            ci[name] = (float(lo), float(hi))

    prev = result.prevalence
    if prev is None:
        return ci
    tau = np.sqrt(result.params.tau2)
    k = w_hat.size
    rows = {}

    def jac_row():
        return np.zeros(k)

    row = jac_row()
    row[0] = -1.0 / tau
    row[2 + p] = -prev.alpha_t / 2.0
    rows["alpha_t"] = (prev.alpha_t, row)
    for j in range(p):
        row = jac_row()
        row[1 + j] = -1.0 / tau
        row[2 + p] = -(-result.params.beta_gamma[j] / tau) / 2.0
        rows[f"beta_t_{dataset.covariate_names[j]}"] = (float(-result.params.beta_gamma[j] / tau), row)
    if varying:
        row = jac_row()
        row[2 + p] = -(1.0 / tau) / 2.0
        rows["beta_t_threshold"] = (1.0 / tau, row)
    row = jac_row()
    row[1 + p] = 1.0
    row[2 + p] = -1.0
    rows["log_sigma2_t"] = (float(np.log(prev.sigma2_t)), row)

    for name, (val, row) in rows.items():
        var = float(row @ cov @ row)
        s = np.sqrt(max(var, 0.0))
        if name == "log_sigma2_t":
            ci["sigma2_t"] = (float(np.exp(val - z * s)), float(np.exp(val + z * s)))
        else:
            ci[name] = (float(val - z * s), float(val + z * s))
    return ci


def _prevalence_estimates(prev: PrevalenceParams, dataset, varying):
    out = {"alpha_t": prev.alpha_t, "sigma2_t": prev.sigma2_t}
    names = list(dataset.covariate_names) + (["threshold"] if varying else [])
    for nm, b in zip(names, prev.beta_gamma_t):
        out[f"beta_t_{nm}"] = float(b)
    return out
