"""Domain types and spatial primitives.

Survey containers, the exponential correlation model, covariance assembly,
Gaussian-process and survey simulation, dichotomization, linear-spline bases
and the bridge between continuous-scale and prevalence-scale parameters.

All containers are frozen and their arrays are marked read-only, so every
operation here is pure given its seed and safe to call from parallel workers.
Random streams follow the splitting rule documented in
:func:`dichogeo.numerics.derive_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ParameterDomainError, SchemaError
from .numerics import derive_rng, safe_cholesky


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Location:
    """A survey location: planar coordinates plus an opaque label."""

    x: float
    y: float
    id: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise SchemaError(f"location {self.id!r} has non-finite coordinates ({self.x}, {self.y})")


class CorrelationFamily(Enum):
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class CorrelationModel:
    """Isotropic correlation function rho(u); only the exponential family."""

    phi: float
    family: CorrelationFamily = CorrelationFamily.EXPONENTIAL

    def __post_init__(self):
        _check_phi(self.phi)

    def __call__(self, u):
        return exp_correlation(u, self.phi)


@dataclass(frozen=True)
class SplineSpec:
    """Knot positions of a linear spline basis (strictly ascending)."""

    knots: tuple

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        if any(not np.isfinite(k) for k in knots):
            raise ParameterDomainError(f"spline knots must be finite, got {knots}")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ParameterDomainError(f"spline knots must be strictly ascending, got {knots}")

    @property
    def n_basis(self):
        return 1 + len(self.knots)


@dataclass(frozen=True)
class ModelParams:
    """Continuous-scale model parameters (alpha, stacked beta/gamma, sigma2, tau2, phi).

    ``sigma2`` and ``tau2`` may be zero only for simulation/test use; fitting
    code calls :meth:`require_positive` and works on log variances, so zero
    is unreachable there.
    """

    alpha: float
    beta_gamma: np.ndarray
    sigma2: float
    tau2: float
    phi: float

    def __post_init__(self):
        bg = np.atleast_1d(np.asarray(self.beta_gamma, dtype=float))
        bg.setflags(write=False)
        object.__setattr__(self, "beta_gamma", bg)
        vals = [self.alpha, self.sigma2, self.tau2, self.phi]
        if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(bg)):
            raise ParameterDomainError("model parameters must be finite")
        if self.sigma2 < 0 or self.tau2 < 0:
            raise ParameterDomainError(f"variances must be non-negative (sigma2={self.sigma2}, tau2={self.tau2})")
        _check_phi(self.phi)

    def require_positive(self):
        if self.sigma2 <= 0 or self.tau2 <= 0:
            raise ParameterDomainError(
                f"sigma2 and tau2 must be strictly positive outside test mode "
                f"(sigma2={self.sigma2}, tau2={self.tau2})"
            )
        return self


@dataclass(frozen=True)
class PrevalenceParams:
    """Prevalence-scale parameters (alpha_t, stacked beta/gamma tilde, sigma2_t, phi).

    When thresholds vary across individuals the stacked coefficient vector
    carries the threshold-column coefficient (1/tau under the bridge) as its
    last entry, matching the convention that the threshold covariate is the
    last design column.
    """

    alpha_t: float
    beta_gamma_t: np.ndarray
    sigma2_t: float
    phi: float

    def __post_init__(self):
        bg = np.atleast_1d(np.asarray(self.beta_gamma_t, dtype=float))
        bg.setflags(write=False)
        object.__setattr__(self, "beta_gamma_t", bg)
        if not np.isfinite(self.alpha_t) or not np.all(np.isfinite(bg)) or not np.isfinite(self.sigma2_t):
            raise ParameterDomainError("prevalence parameters must be finite")
        if self.sigma2_t < 0:
            raise ParameterDomainError(f"sigma2_t must be non-negative, got {self.sigma2_t}")
        _check_phi(self.phi)

    def require_positive(self):
        if self.sigma2_t <= 0:
            raise ParameterDomainError(f"sigma2_t must be strictly positive outside test mode, got {self.sigma2_t}")
        return self


@dataclass(frozen=True)
class SurveyDataset:
    """Survey data: locations, per-individual outcomes, covariates, thresholds.

    ``loc_index`` maps each of the N individuals to one of the m locations;
    ``covariates`` is the N-by-p design block without the intercept column.
    Exactly one of ``y`` (continuous) / ``y_binary`` may be present, or both
    when a dataset has been dichotomized but the source values are kept.
    Thresholds are present for all individuals or for none.
    """

    locations: tuple
    loc_index: np.ndarray
    covariates: np.ndarray
    y: Optional[np.ndarray] = None
    y_binary: Optional[np.ndarray] = None
    thresholds: Optional[np.ndarray] = None
    threshold_log_scale: bool = False
    covariate_names: tuple = ()

    def __post_init__(self):
        locs = tuple(self.locations)
        object.__setattr__(self, "locations", locs)
        if len(locs) < 1:
            raise SchemaError("dataset needs at least one location")
        ids = [loc.id for loc in locs if loc.id]
        if len(ids) != len(set(ids)):
            raise SchemaError("location ids must be unique within a dataset")

        idx = np.asarray(self.loc_index, dtype=int)
        if idx.ndim != 1 or idx.size == 0:
            raise SchemaError("loc_index must be a non-empty 1-d array")
        if idx.min() < 0 or idx.max() >= len(locs):
            raise SchemaError("loc_index refers to locations outside the dataset")
        counts = np.bincount(idx, minlength=len(locs))
        if (counts == 0).any():
            raise SchemaError("every location must have at least one individual (n_i >= 1)")
        idx.setflags(write=False)
        object.__setattr__(self, "loc_index", idx)

        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1)
        if cov.size == 0:
            cov = np.zeros((idx.size, 0))
        if cov.shape[0] != idx.size:
            raise SchemaError(f"covariate rows ({cov.shape[0]}) must match individuals ({idx.size})")
        if not np.all(np.isfinite(cov)):
            raise SchemaError("covariates must be finite")
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise SchemaError("covariate_names length must match the covariate columns")
        object.__setattr__(self, "covariate_names", names)

        for attr in ("y", "y_binary", "thresholds"):
            val = getattr(self, attr)
            if val is None:
                continue
            arr = np.asarray(val, dtype=float)
            if arr.shape != (idx.size,):
                raise SchemaError(f"{attr} must have one entry per individual")
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"{attr} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if self.y_binary is not None and not np.isin(self.y_binary, (0.0, 1.0)).all():
            raise SchemaError("binary outcomes must be 0 or 1")

    # -- conveniences -------------------------------------------------------

    @property
    def n_locations(self):
        return len(self.locations)

    @property
    def n_individuals(self):
        return self.loc_index.size

    @property
    def n_per_location(self):
        return np.bincount(self.loc_index, minlength=self.n_locations)

    @property
    def coords(self):
        return np.array([[loc.x, loc.y] for loc in self.locations])

    def location_distances(self):
        c = self.coords
        return cdist(c, c)

    def individual_distances(self):
        d = self.location_distances()
        return d[np.ix_(self.loc_index, self.loc_index)]

    def with_outcome(self, **kwargs):
        return replace(self, **kwargs)

    @classmethod
    def from_arrays(cls, coords, loc_index=None, covariates=None, ids=None, **kwargs):
        """Build a dataset from plain arrays; one individual per location by default."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if ids is None:
            ids = [f"loc{i}" for i in range(coords.shape[0])]
        locs = tuple(Location(float(x), float(y), str(i)) for (x, y), i in zip(coords, ids))
        if loc_index is None:
            loc_index = np.arange(coords.shape[0])
        if covariates is None:
            covariates = np.zeros((np.asarray(loc_index).size, 0))
        return cls(locations=locs, loc_index=loc_index, covariates=covariates, **kwargs)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _check_phi(phi):
    if not np.isfinite(phi) or phi <= 0:
        raise ParameterDomainError(f"correlation scale phi must be finite and positive, got {phi}")


def exp_correlation(u, phi):
    """Exponential correlation exp(-u/phi); u may be a scalar or array."""
    _check_phi(phi)
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)) or np.any(u < 0):
        raise ParameterDomainError("distances must be finite and non-negative")
    out = np.exp(-u / phi)
    return float(out) if out.ndim == 0 else out


def build_covariance(dataset: SurveyDataset, params: ModelParams):
    """Individual-level covariance sigma2 * rho(d_ij) + tau2 on the diagonal.

    The matrix is validated with the jittered Cholesky policy; if jitter was
    required to factorize it, the returned matrix includes that jitter.
    """
    u = dataset.individual_distances()
    cov = params.sigma2 * exp_correlation(u, params.phi) if params.sigma2 > 0 else np.zeros_like(u)
    cov = cov + params.tau2 * np.eye(dataset.n_individuals)
    _, jitter = safe_cholesky(cov, what="survey covariance")
    if jitter > 0:
        cov = cov + jitter * np.eye(dataset.n_individuals)
    return cov


def as_coords(locations):
    """Coerce a list of Location or an (m, 2) array to coordinates."""
    if isinstance(locations, np.ndarray):
        return np.atleast_2d(np.asarray(locations, dtype=float))
    if len(locations) and isinstance(locations[0], Location):
        return np.array([[loc.x, loc.y] for loc in locations])
    return np.atleast_2d(np.asarray(locations, dtype=float))


def simulate_gp(locations, sigma2, phi, seed):
    """One draw of the zero-mean spatial field at the given locations.

    Built as L z with L the lower triangular factor of sigma2 * rho(dist)
    and z standard normal, so output is deterministic for a fixed seed.
    sigma2 = 0 is the degenerate test-mode limit and yields zeros.
    """
    coords = as_coords(locations)
    if sigma2 < 0:
        raise ParameterDomainError(f"sigma2 must be non-negative, got {sigma2}")
    rng = derive_rng(seed)
    z = rng.standard_normal(coords.shape[0])
    if sigma2 == 0:
        return np.zeros(coords.shape[0])
    _check_phi(phi)
    cov = sigma2 * np.exp(-cdist(coords, coords) / phi)
    L, _ = safe_cholesky(cov, what="spatial field covariance")
    return L @ z


def simulate_survey(locations, loc_index, covariates, params: ModelParams, seed,
                    covariate_names=()):
    """Simulate a continuous-outcome survey: y_ij = mu_ij + S(x_i) + Z_ij.

    The field draw uses the (seed, 0) stream and the nugget noise (seed, 1),
    so the same seed always reproduces the same dataset.
    """
    coords = as_coords(locations)
    loc_index = np.asarray(loc_index, dtype=int)
    if covariates is None:
        covariates = np.zeros((loc_index.size, 0))
    covariates = np.asarray(covariates, dtype=float)
    if covariates.size == 0:
        covariates = covariates.reshape(loc_index.size, 0)
    if covariates.shape[0] != loc_index.size:
        raise SchemaError(
            f"design matrix rows ({covariates.shape[0]}) must equal the number of individuals ({loc_index.size})"
        )
    if covariates.shape[1] != params.beta_gamma.size:
        raise SchemaError(
            f"design has {covariates.shape[1]} columns but params carry {params.beta_gamma.size} coefficients"
        )
    s = simulate_gp(coords, params.sigma2, params.phi, derive_rng(seed, 0))
    z = derive_rng(seed, 1).standard_normal(loc_index.size)
    mu = params.alpha + covariates @ params.beta_gamma
    y = mu + s[loc_index] + np.sqrt(params.tau2) * z
    ds = SurveyDataset.from_arrays(coords, loc_index=loc_index, covariates=covariates,
                                   covariate_names=covariate_names, y=y)
    return ds, s


def dichotomize(dataset: SurveyDataset, thresholds, log_scale=False):
    """Binary view of a continuous survey: 1 where y < c, else 0.

    ``thresholds`` is a scalar c or one value per individual; they are kept
    on the result so downstream models can use them as a covariate.
    """
    if dataset.y is None:
        raise SchemaError("dichotomize requires continuous outcomes")
    c = np.asarray(thresholds, dtype=float)
    if c.ndim == 0:
        c = np.full(dataset.n_individuals, float(c))
    if c.shape != (dataset.n_individuals,):
        raise SchemaError("one threshold per individual is required (or a scalar)")
    if not np.all(np.isfinite(c)):
        raise SchemaError("thresholds must be finite for every individual")
    yb = (dataset.y < c).astype(float)
    return replace(dataset, y=None, y_binary=yb, thresholds=c, threshold_log_scale=log_scale)


def to_prevalence_scale(params: ModelParams, c):
    """Map continuous-scale parameters to the prevalence scale at threshold c.

    alpha_t = (c - alpha)/tau, beta_t = -beta/tau, sigma2_t = sigma2/tau2,
    phi unchanged.
    """
    if params.tau2 <= 0:
        raise ParameterDomainError(f"the prevalence bridge requires tau2 > 0, got {params.tau2}")
    if not np.isfinite(c):
        raise ParameterDomainError(f"threshold must be finite, got {c}")
    tau = np.sqrt(params.tau2)
    return PrevalenceParams(
        alpha_t=(float(c) - params.alpha) / tau,
        beta_gamma_t=-params.beta_gamma / tau,
        sigma2_t=params.sigma2 / params.tau2,
        phi=params.phi,
    )


def to_prevalence_scale_varying(params: ModelParams):
    """Prevalence-scale view when thresholds vary across individuals.

    The threshold enters the binary design as its last column, so the
    stacked coefficients gain a final entry 1/tau and the intercept image is
    -alpha/tau (the threshold contribution moves into the design).
    """
    if params.tau2 <= 0:
        raise ParameterDomainError(f"the prevalence bridge requires tau2 > 0, got {params.tau2}")
    tau = np.sqrt(params.tau2)
    bg = np.concatenate([-params.beta_gamma / tau, [1.0 / tau]])
    return PrevalenceParams(
        alpha_t=-params.alpha / tau,
        beta_gamma_t=bg,
        sigma2_t=params.sigma2 / params.tau2,
        phi=params.phi,
    )


def spline_basis(a, spec: SplineSpec):
    """Linear-spline basis at a: (a, max(0, a - k_1), ..., max(0, a - k_K))."""
    a = float(a)
    if not np.isfinite(a):
        raise ParameterDomainError(f"spline input must be finite, got {a}")
    return np.array([a] + [max(0.0, a - k) for k in spec.knots])


def spline_design(values, spec: SplineSpec):
    """Vectorized spline basis: one row per entry of ``values``."""
    v = np.asarray(values, dtype=float)
    cols = [v] + [np.maximum(0.0, v - k) for k in spec.knots]
    return np.column_stack(cols)


def equirect_project(lon, lat, origin=None):
    """Equirectangular lon/lat -> kilometre coordinates.

    Optional preprocessing for real survey data whose correlation scale is
    in kilometres; ``origin`` defaults to the centroid of the inputs.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if origin is None:
        origin = (float(np.mean(lon)), float(np.mean(lat)))
    lon0, lat0 = origin
    r_earth = 6371.0
    x = r_earth * np.cos(np.deg2rad(lat0)) * np.deg2rad(lon - lon0)
    y = r_earth * np.deg2rad(lat - lat0)
    return np.column_stack([x, y])
