"""Simulation study: scenario grid, replicate execution, bias/MSE aggregation.

Each replicate simulates a continuous survey on a regular grid, dichotomizes
it at the scenario threshold, fits both models, and records parameter
estimates plus plug-in prevalence predictions at the grid points.  Replicates
run in parallel workers but aggregation is a deterministic fold in replicate
order, and per-replicate checkpoint files make long studies resumable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .binomial import LatentIntegrationSettings, fit_binomial
from .core import (ModelParams, PrevalenceParams, SurveyDataset, dichotomize,
                   simulate_survey)
from .errors import ParameterDomainError
from .linear import FitOptions, fit_linear
from .numerics import chol_solve, limit_blas_threads, safe_cholesky

TAU2_SET = (0.5, 1.0, 2.0)
PHI_SET = (0.1, 0.2)
C_SET = (0.0, 0.2, 0.4)
GRID_KINDS = ("unit225", "extended450")

PARAM_KEYS = ("alpha_t", "sigma2_t", "phi")


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of the study grid plus execution knobs."""

    tau2: float
    phi: float
    c: float
    alpha: float = 0.0
    sigma2: float = 1.0
    grid: str = "unit225"
    n_reps: int = 200
    seed: int = 0
    allow_custom: bool = False

    def __post_init__(self):
        if self.grid not in GRID_KINDS:
            raise ParameterDomainError(f"grid must be one of {GRID_KINDS}, got {self.grid!r}")
        if not self.allow_custom:
            if self.tau2 not in TAU2_SET or self.phi not in PHI_SET or self.c not in C_SET:
                raise ParameterDomainError(
                    f"(tau2={self.tau2}, phi={self.phi}, c={self.c}) is outside the configured "
                    f"scenario sets; pass allow_custom=True to override"
                )
        if self.n_reps < 0:
            raise ParameterDomainError("n_reps must be non-negative")

    @property
    def tag(self):
        return f"tau2_{self.tau2:g}_phi_{self.phi:g}_c_{self.c:g}_{self.grid}"


@dataclass
class CellSummary:
    """Bias/MSE (with Monte-Carlo standard errors) for one scenario cell."""

    spec: ScenarioSpec
    n_ok: dict = field(default_factory=dict)       # model -> replicates used
    n_failed: dict = field(default_factory=dict)   # model -> replicates excluded
    bias: dict = field(default_factory=dict)       # (param, model) -> value
    mse: dict = field(default_factory=dict)
    mcse_bias: dict = field(default_factory=dict)
    mcse_mse: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)        # replicate-level estimate arrays


@dataclass
class SimReport:
    cells: list = field(default_factory=list)

    def cell(self, tau2, phi, c):
        for cell in self.cells:
            if (cell.spec.tau2, cell.spec.phi, cell.spec.c) == (tau2, phi, c):
                return cell
        raise KeyError(f"no cell (tau2={tau2}, phi={phi}, c={c})")


def generate_grid(kind: str):
    """Regular study grids: 15x15 on the unit square, optionally doubled by a
    translated copy so 450 points cover [0, ~2] x [0, 1]."""
    if kind not in GRID_KINDS:
        raise ParameterDomainError(f"grid must be one of {GRID_KINDS}, got {kind!r}")
    ticks = np.arange(15) / 14.0
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    base = np.column_stack([xx.ravel(), yy.ravel()])
    if kind == "unit225":
        return base
    shifted = base + np.array([1.0 + 1.0 / 14.0, 0.0])
    return np.vstack([base, shifted])


def _simulate_replicate(spec: ScenarioSpec, coords, rep):
    params = ModelParams(alpha=spec.alpha, beta_gamma=np.zeros(0),
                         sigma2=spec.sigma2, tau2=spec.tau2, phi=spec.phi)
    rep_stream = np.random.SeedSequence(spec.seed, spawn_key=(rep,))
    ds, s_true = simulate_survey(coords, np.arange(coords.shape[0]), None, params,
                                 seed=rep_stream)
    return ds, s_true


def _kriging_at_data(params: ModelParams, dataset: SurveyDataset):
    """Conditional mean and pointwise variance of S at the data locations
    (single observation per location)."""
    from scipy.linalg import solve_triangular

    u = dataset.individual_distances()
    corr = np.exp(-u / params.phi)
    k_mat = params.sigma2 * corr
    cov_y = k_mat + params.tau2 * np.eye(dataset.n_individuals)
    l_chol, _ = safe_cholesky(cov_y, what="Sigma_Y")
    resid = dataset.y - params.alpha
    mean = k_mat @ chol_solve(l_chol, resid)
    half = solve_triangular(l_chol, k_mat, lower=True, check_finite=False)
    var = np.maximum(params.sigma2 - np.sum(half * half, axis=0), 0.0)
    return mean, var


DEFAULT_STUDY_SETTINGS = LatentIntegrationSettings(mode="mcml", is_samples=800,
                                                   mcml_rounds=1)


def run_replicate(spec: ScenarioSpec, coords, rep,
                  settings: Optional[LatentIntegrationSettings] = None):
    """Simulate, fit both models, and return the replicate record.

    Each model can fail independently (recorded with its reason and excluded
    from that model's aggregates only); failures never abort the study.
    """
    settings = settings or DEFAULT_STUDY_SETTINGS
    rep_seed = int(np.random.SeedSequence(spec.seed, spawn_key=(rep, 2)).generate_state(1)[0])
    settings = replace(settings, seed=rep_seed)
    record = {"rep": rep, "B": None, "C": None, "B_reason": "", "C_reason": ""}
    try:
        ds_cont, s_true = _simulate_replicate(spec, coords, rep)
        ds_bin = dichotomize(ds_cont, spec.c)
        tau_true = math.sqrt(spec.tau2)
        alpha_t_true = (spec.c - spec.alpha) / tau_true
        p_true = ndtr(alpha_t_true - s_true / tau_true)
    except Exception as exc:  # noqa: BLE001
        record["B_reason"] = record["C_reason"] = f"simulation: {type(exc).__name__}: {exc}"
        return record

    fit_c = None
    try:
        fit_c = fit_linear(ds_cont, options=FitOptions(threshold=spec.c, compute_info=False,
                                                       grad_tol=1e-5, n_restarts=3))
        if not fit_c.converged:
            record["C_reason"] = f"linear fit: {fit_c.message}"
        elif fit_c.params.tau2 < 0.02 * float(np.var(ds_cont.y)):
            # nugget collapsed onto the flat low-tau2 ridge: every bridged
            # (divide-by-tau) quantity is unusable for this replicate
            record["C_reason"] = (f"degenerate nugget (tau2={fit_c.params.tau2:.3g}); "
                                  f"bridge undefined")
        else:
            prev_c = fit_c.prevalence
            # posterior mean of prevalence, E[Phi(alpha_t + S_t) | y], via the
            # pointwise conditional Gaussian: Phi((alpha_t + m)/sqrt(1 + v))
            s_hat, s_var = _kriging_at_data(fit_c.params, ds_cont)
            m_t = prev_c.alpha_t - s_hat / math.sqrt(fit_c.params.tau2)
            v_t = s_var / fit_c.params.tau2
            p_hat_c = ndtr(m_t / np.sqrt(1.0 + v_t))
            record["C"] = {"alpha_t": prev_c.alpha_t, "sigma2_t": prev_c.sigma2_t,
                           "phi": fit_c.params.phi,
                           "pred_bias": float(np.mean(p_hat_c - p_true)),
                           "pred_mse": float(np.mean((p_hat_c - p_true) ** 2))}
    except Exception as exc:  # noqa: BLE001 - replicate failures are data, not crashes
        record["C_reason"] = f"{type(exc).__name__}: {exc}"

    try:
        if record["C"] is not None:
            # anchor the Monte-Carlo likelihood at the linear-model image of
            # the parameters, the transformation the bridge exists for
            prev_c = fit_c.prevalence
            init_b = PrevalenceParams(alpha_t=float(np.clip(prev_c.alpha_t, -5.0, 5.0)),
                                      beta_gamma_t=np.clip(prev_c.beta_gamma_t, -5.0, 5.0),
                                      sigma2_t=float(np.clip(prev_c.sigma2_t, 0.05, 20.0)),
                                      phi=float(np.clip(fit_c.params.phi, 1e-3, 10.0)))
        else:
            init_b = None  # fall back to the non-spatial default inside the fitter
        fit_b = fit_binomial(ds_bin, init=init_b, settings=settings,
                             options=FitOptions(compute_info=False, grad_tol=1e-4))
        if not fit_b.converged:
            record["B_reason"] = f"binomial fit: {fit_b.message}"
        else:
            prev_b = fit_b.prevalence
            latent_b = fit_b.extra["latent_mean"]
            latent_v = fit_b.extra["latent_var"]
            p_hat_b = ndtr((prev_b.alpha_t + latent_b) / np.sqrt(1.0 + latent_v))
            record["B"] = {"alpha_t": prev_b.alpha_t, "sigma2_t": prev_b.sigma2_t,
                           "phi": prev_b.phi,
                           "pred_bias": float(np.mean(p_hat_b - p_true)),
                           "pred_mse": float(np.mean((p_hat_b - p_true) ** 2))}
    except Exception as exc:  # noqa: BLE001
        record["B_reason"] = f"{type(exc).__name__}: {exc}"
    return record


def _checkpoint_path(checkpoint_dir, spec, rep):
    return Path(checkpoint_dir) / spec.tag / f"rep_{rep:05d}.json"


def _run_or_load(spec, coords, rep, settings, checkpoint_dir):
    if checkpoint_dir is not None:
        path = _checkpoint_path(checkpoint_dir, spec, rep)
        if path.exists():
            return json.loads(path.read_text())
    record = run_replicate(spec, coords, rep, settings)
    if checkpoint_dir is not None:
        path = _checkpoint_path(checkpoint_dir, spec, rep)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record))
    return record


def _worker(spec, coords, rep, settings, checkpoint_dir):
    limit_blas_threads()
    return _run_or_load(spec, coords, rep, settings, checkpoint_dir)


def run_scenario(spec: ScenarioSpec, workers: int = 1,
                 settings: Optional[LatentIntegrationSettings] = None,
                 checkpoint_dir=None) -> CellSummary:
    """Execute one scenario cell and aggregate bias/MSE against the truth."""
    coords = generate_grid(spec.grid)
    settings = settings or DEFAULT_STUDY_SETTINGS
    limit_blas_threads()
    reps = range(spec.n_reps)
    if workers > 1 and spec.n_reps > 1:
        from joblib import Parallel, delayed

        records = Parallel(n_jobs=workers, batch_size=4)(
            delayed(_worker)(spec, coords, rep, settings, checkpoint_dir) for rep in reps
        )
    else:
        records = [_run_or_load(spec, coords, rep, settings, checkpoint_dir) for rep in reps]
    records.sort(key=lambda r: r["rep"])
    return aggregate(spec, records)


def aggregate(spec: ScenarioSpec, records) -> CellSummary:
    cell = CellSummary(spec=spec)
    tau_true = math.sqrt(spec.tau2)
    truth = {"alpha_t": (spec.c - spec.alpha) / tau_true,
             "sigma2_t": spec.sigma2 / spec.tau2,
             "phi": spec.phi}

    for model in ("B", "C"):
        ok = [r for r in records if r.get(model) is not None]
        cell.n_ok[model] = len(ok)
        cell.n_failed[model] = len(records) - len(ok)
        cell.raw[("failures", model)] = [r.get(f"{model}_reason", "")
                                         for r in records if r.get(model) is None]
        for key in PARAM_KEYS:
            est = np.array([r[model][key] for r in ok])
            cell.raw[(key, model)] = est
            if est.size == 0:
                continue
            err = est - truth[key]
            cell.bias[(key, model)] = float(np.mean(err))
            cell.mse[(key, model)] = float(np.mean(err ** 2))
            cell.mcse_bias[(key, model)] = _mcse(err)
            cell.mcse_mse[(key, model)] = _mcse(err ** 2)
        pred_bias = np.array([r[model]["pred_bias"] for r in ok])
        pred_mse = np.array([r[model]["pred_mse"] for r in ok])
        cell.raw[("pred_bias", model)] = pred_bias
        cell.raw[("pred_mse", model)] = pred_mse
        if pred_bias.size:
            cell.bias[("pred", model)] = float(np.mean(pred_bias))
            cell.mse[("pred", model)] = float(np.mean(pred_mse))
            cell.mcse_bias[("pred", model)] = _mcse(pred_bias)
            cell.mcse_mse[("pred", model)] = _mcse(pred_mse)
    return cell


def _mcse(values):
    if values.size < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


def table_one_specs(n_reps=200, seed=0, grid="unit225"):
    """The full 18-cell scenario grid."""
    specs = []
    for tau2 in TAU2_SET:
        for phi in PHI_SET:
            for c in C_SET:
                specs.append(ScenarioSpec(tau2=tau2, phi=phi, c=c, grid=grid,
                                          n_reps=n_reps, seed=seed))
    return specs


def run_study(specs, workers: int = 1,
              settings: Optional[LatentIntegrationSettings] = None,
              checkpoint_dir=None, progress=None) -> SimReport:
    report = SimReport()
    for spec in specs:
        cell = run_scenario(spec, workers=workers, settings=settings,
                            checkpoint_dir=checkpoint_dir)
        report.cells.append(cell)
        if progress is not None:
            progress(cell)
    return report


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def report_rows(report: SimReport):
    """Flat rows (cell, parameter, model, bias, mse, mcse_bias, mcse_mse, n_ok)."""
    rows = []
    for cell in report.cells:
        s = cell.spec
        for key in PARAM_KEYS + ("pred",):
            for model in ("B", "C"):
                if (key, model) not in cell.bias:
                    continue
                rows.append({
                    "tau2": s.tau2, "phi": s.phi, "c": s.c, "grid": s.grid,
                    "parameter": key, "model": model,
                    "bias": cell.bias[(key, model)], "mse": cell.mse[(key, model)],
                    "mcse_bias": cell.mcse_bias[(key, model)],
                    "mcse_mse": cell.mcse_mse[(key, model)],
                    "n_ok": cell.n_ok[model], "n_failed": cell.n_failed[model],
                })
    return rows


def format_tables(report: SimReport):
    """Text tables in the parameter-block / prediction layout of the study."""
    lines = []
    c_values = sorted({cell.spec.c for cell in report.cells})

    def fmt(cell, key, model):
        if (key, model) not in cell.bias:
            return "     --      "
        return f"{cell.bias[(key, model)]:7.3f} ({cell.mse[(key, model)]:.3f})"

    lines.append("Parameter estimates: bias (MSE) by model")
    header = "param   tau2  phi " + " | ".join(f"c={c:g}: B, C" for c in c_values)
    lines.append(header)
    seen = sorted({(cell.spec.tau2, cell.spec.phi) for cell in report.cells})
    for key in PARAM_KEYS:
        for tau2, phi in seen:
            row = [f"{key:8s}{tau2:5g}{phi:5g}"]
            for c in c_values:
                try:
                    cell = report.cell(tau2, phi, c)
                    row.append(f"{fmt(cell, key, 'B')} {fmt(cell, key, 'C')}")
                except KeyError:
                    row.append("missing")
            lines.append(" ".join(row))
    lines.append("")
    lines.append("Prevalence predictions: bias (MSE) by model")
    for tau2, phi in seen:
        row = [f"pred    {tau2:5g}{phi:5g}"]
        for c in c_values:
            try:
                cell = report.cell(tau2, phi, c)
                row.append(f"{fmt(cell, 'pred', 'B')} {fmt(cell, 'pred', 'C')}")
            except KeyError:
                row.append("missing")
        lines.append(" ".join(row))
    return "\n".join(lines)
