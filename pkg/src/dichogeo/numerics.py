"""Shared numerical kernels.

Holds the pieces every other module leans on: the seed-splitting rule, the
jittered Cholesky policy, numerically safe probit log-probabilities with
their first two derivatives, and quadrature node generators (tensor
Gauss-Hermite, Halton and Sobol points mapped to standard normals).
"""

from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri
from scipy.stats import qmc

from .errors import NumericalConditioningError, ParameterDomainError

# Probabilities are clamped to [1e-12, 1 - 1e-12] before logs so that linear
# predictors beyond +-7 cannot produce -inf log-likelihood terms.
P_FLOOR = 1e-12
LOG_P_FLOOR = float(np.log(P_FLOOR))

_LOG_2PI = float(np.log(2.0 * np.pi))


def derive_rng(seed, *key):
    """Random generator for the stream identified by ``(seed, *key)``.

    The splitting rule used throughout the package: every stochastic routine
    derives its stream as ``default_rng(SeedSequence(seed, spawn_key=key))``,
    so independent replicates/tiles get independent streams and any stream is
    reproducible from the top-level seed alone.  Passing a SeedSequence
    extends its spawn key, which lets callers chain sub-streams.
    """
    if isinstance(seed, np.random.Generator):
        if key:
            raise ValueError("cannot sub-key an already constructed Generator")
        return seed
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in key))
        return np.random.default_rng(ss)
    if isinstance(seed, (tuple, list)):
        base, *prefix = seed
        key = tuple(int(k) for k in prefix) + tuple(int(k) for k in key)
        return np.random.default_rng(np.random.SeedSequence(int(base), spawn_key=key))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def safe_cholesky(mat, what="covariance matrix"):
    """Lower Cholesky factor with the escalating-jitter policy.

    Attempts a plain factorization first; on failure adds jitter
    ``1e-10 * mean(diag)`` to the diagonal, escalating tenfold at most three
    times before raising.  Returns ``(L, jitter)`` where ``jitter`` is the
    amount actually added (0.0 in the common case).
    """
    try:
        return np.linalg.cholesky(mat), 0.0
    except np.linalg.LinAlgError:
        pass
    base = 1e-10 * float(np.mean(np.diag(mat)))
    if not np.isfinite(base) or base <= 0.0:
        base = 1e-12
    jitter = base
    eye = np.eye(mat.shape[0])
    for _ in range(3):
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalConditioningError(
        f"Cholesky factorization of {what} failed after jitter escalation up to {jitter / 10.0:g}"
    )


def chol_solve(L, b):
    """Solve ``A x = b`` given the lower Cholesky factor ``L`` of ``A``."""
    from scipy.linalg import solve_triangular

    y = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, y, lower=False, check_finite=False)


def chol_logdet(L):
    """log det(A) from the lower Cholesky factor of A."""
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def norm_logpdf(z):
    return -0.5 * (z * z + _LOG_2PI)


def log_probit_prob(eta, y):
    """Clamped ``log P(Y = y)`` for Bernoulli outcomes with probit link.

    ``eta`` is the linear predictor, ``y`` in {0, 1}; both broadcast.  The
    result is floored at log(1e-12), the clamp policy for extreme predictors.
    """
    z = np.where(np.asarray(y) == 1, eta, -np.asarray(eta))
    return np.maximum(log_ndtr(z), LOG_P_FLOOR)


def probit_terms(eta, y):
    """(log-prob, d/deta, d2/deta2) of the Bernoulli-probit log density.

    The value is clamped like :func:`log_probit_prob`; the derivatives use the
    exact hazard ratio phi/Phi (computed in log space, so stable far into the
    tails) because clamping them would zero out curvature where it is small
    but not negligible for quadrature.
    """
    eta = np.asarray(eta, dtype=float)
    sign = np.where(np.asarray(y) == 1, 1.0, -1.0)
    z = sign * eta
    lp_exact = log_ndtr(z)
    d1 = np.exp(norm_logpdf(z) - lp_exact)  # phi(z)/Phi(z)
    dg = sign * d1
    d2g = -d1 * (z + d1)
    return np.maximum(lp_exact, LOG_P_FLOOR), dg, d2g


def gauss_hermite_nodes(order, dim):
    """Tensor-product Gauss-Hermite rule for standard-normal expectations.

    Returns ``(nodes, log_weights)`` with ``nodes`` of shape ``(order**dim,
    dim)`` such that ``E[h(V)] ~= sum_k exp(log_weights[k]) * h(nodes[k])``
    for ``V ~ N(0, I_dim)``; the weights sum to one.
    """
    if order < 2:
        raise ParameterDomainError(f"quadrature order must be >= 2, got {order}")
    x, w = np.polynomial.hermite.hermgauss(order)
    logw = np.log(w)
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    logws = np.array(list(itertools.product(logw, repeat=dim))).sum(axis=1)
    logws -= 0.5 * dim * np.log(np.pi)
    return np.sqrt(2.0) * nodes, logws


def halton_normal(n, dim, seed):
    """``n`` scrambled-Halton points mapped to standard normals, shape (n, dim)."""
    sampler = qmc.Halton(d=dim, scramble=True, seed=derive_rng(seed) if not isinstance(seed, np.random.Generator) else seed)
    u = sampler.random(n)
    return ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))


def sobol_normal(n, dim, seed):
    """``n`` scrambled-Sobol points mapped to standard normals, shape (n, dim)."""
    sampler = qmc.Sobol(d=dim, scramble=True, seed=derive_rng(seed) if not isinstance(seed, np.random.Generator) else seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two draws
        u = sampler.random(n)
    return ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))


def probit_cdf(eta):
    """Phi(eta) clamped to [1e-12, 1 - 1e-12]."""
    return np.clip(ndtr(eta), P_FLOOR, 1.0 - P_FLOOR)


def limit_blas_threads():
    """Pin BLAS pools to one thread for the current process.

    The dense problems here are a few hundred square; thread spin-waits cost
    far more than they save, especially with replicate-level parallelism on
    top.  Called by the CLI and the study harness; a no-op if threadpoolctl
    is unavailable.
    """
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass
