"""Batch front door: declarative YAML configs driving every task.

``dichogeo <task> --config run.yaml [--seed N] [--workers N]``

Tasks: simulate, fit-linear, fit-binomial, info-curve, cld, predict,
sim-study.  All randomness flows from the single top-level seed through the
documented splitting rule; outputs are written with full precision so a
rerun with the same config is byte-identical, and every run leaves a
machine-readable manifest (settings echo, input digests, output list).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .binomial import LatentIntegrationSettings, fit_binomial
from .core import (ModelParams, PrevalenceParams, SplineSpec, SurveyDataset,
                   dichotomize, equirect_project, simulate_survey, spline_design)
from .errors import ConfigError, DichogeoError, SchemaError
from .infoloss import EfiSettings, cld, efi_curve
from .io import (ThresholdRule, load_grid, load_survey, load_threshold_table,
                 resolve_thresholds, write_grid_predictions, write_survey)
from .linear import FitOptions, FitResult, fit_linear
from .numerics import limit_blas_threads
from .predict import exceedance_prob, predict_prevalence
from .simstudy import (ScenarioSpec, generate_grid, format_tables, report_rows,
                       run_study)

TASKS = ("simulate", "fit-linear", "fit-binomial", "info-curve", "cld",
         "predict", "sim-study")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    task: str
    seed: int
    workers: int
    output_dir: Path
    raw: dict = field(default_factory=dict)
    config_path: Path = None


def _require(mapping, key, context):
    if key not in mapping:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return mapping[key]


def load_config(path, task=None, seed=None, workers=None) -> RunConfig:
    """Parse and validate the YAML config, overlaying CLI overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping of sections")

    cfg_task = task or raw.get("task")
    if cfg_task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg_task!r}")
    cfg = RunConfig(
        task=cfg_task,
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        workers=int(workers if workers is not None else raw.get("workers", 1)),
        output_dir=Path(raw.get("output_dir", "out")),
        raw=raw,
        config_path=path,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    """Fail fast: surface anything that would later break inside a module."""
    raw = cfg.raw
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.task in ("fit-linear", "fit-binomial", "cld", "predict"):
        survey = _require(raw, "survey", "config")
        sv_path = Path(_require(survey, "path", "survey section"))
        if not sv_path.exists():
            raise ConfigError(f"survey file not found: {sv_path}")
        model = _require(raw, "model", "config")
        _require(model, "outcome", "model section")
        with open(sv_path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in (csv.reader(fh).__next__() or [])]
        needed = set(_plain_columns(model)) | {model["outcome"], "loc_id", "x", "y"}
        for spec in model.get("covariates", []):
            if isinstance(spec, dict):
                needed.add(_require(spec, "column", "covariate entry"))
                knots = spec.get("knots")
                if knots is not None and any(b <= a for a, b in zip(knots, knots[1:])):
                    raise ConfigError(f"spline knots must be strictly ascending, got {knots}")
        missing = sorted(c for c in needed if c not in header)
        if missing:
            raise ConfigError(f"survey file lacks columns referenced by the config: {missing}")
        thr = raw.get("threshold")
        if thr is not None:
            keys = [k for k in ("scalar", "column", "table") if k in thr]
            if len(keys) != 1:
                raise ConfigError(f"threshold section must set exactly one of scalar/column/table, got {keys}")
            if "table" in thr and not Path(thr["table"]["path"]).exists():
                raise ConfigError(f"threshold table not found: {thr['table']['path']}")
            if "column" in thr and thr["column"] not in header:
                raise ConfigError(f"threshold column {thr['column']!r} not in the survey file")
    if cfg.task == "predict":
        pred = _require(raw, "predict", "config")
        grid = _require(pred, "grid", "predict section")
        if not Path(grid).exists():
            raise ConfigError(f"prediction grid not found: {grid}")
        thr = pred.get("exceedance_threshold")
        if thr is not None and not (0.0 < float(thr) < 1.0):
            raise ConfigError(f"exceedance threshold must lie in (0, 1), got {thr}")
    if cfg.task == "sim-study":
        study = raw.get("sim_study", {})
        for key, allowed in (("tau2", (0.5, 1.0, 2.0)), ("phi", (0.1, 0.2)), ("c", (0.0, 0.2, 0.4))):
            vals = study.get(key)
            if vals is not None and not study.get("allow_custom", False):
                bad = [v for v in vals if float(v) not in allowed]
                if bad:
                    raise ConfigError(f"sim_study.{key} values {bad} outside the configured set {allowed}")
    if cfg.task == "simulate":
        sim = _require(raw, "simulate", "config")
        params = _require(sim, "params", "simulate section")
        for key in ("alpha", "sigma2", "tau2", "phi"):
            _require(params, key, "simulate.params")


def _plain_columns(model):
    cols = []
    for spec in model.get("covariates", []):
        if isinstance(spec, str):
            cols.append(spec)
    return cols


# ---------------------------------------------------------------------------
# Model assembly from config
# ---------------------------------------------------------------------------

def _assemble_design(raw_dataset: SurveyDataset, model_cfg, raw_columns):
    """Expand spline entries and keep plain covariates, in declared order."""
    blocks, names = [], []
    for spec in model_cfg.get("covariates", []):
        if isinstance(spec, str):
            blocks.append(raw_columns[spec].reshape(-1, 1))
            names.append(spec)
        else:
            col = spec["column"]
            knots = spec.get("knots")
            if knots:
                basis = spline_design(raw_columns[col], SplineSpec(tuple(knots)))
                blocks.append(basis)
                names.append(col)
                names.extend(f"{col}_gt{k:g}" for k in knots)
            else:
                blocks.append(raw_columns[col].reshape(-1, 1))
                names.append(col)
    design = np.hstack(blocks) if blocks else np.zeros((raw_dataset.n_individuals, 0))
    return raw_dataset.with_outcome(covariates=design, covariate_names=tuple(names))


def _load_model_dataset(cfg: RunConfig, outcome_type):
    raw = cfg.raw
    survey = raw["survey"]
    model = raw["model"]
    lookup_cols = sorted({spec if isinstance(spec, str) else spec["column"]
                          for spec in model.get("covariates", [])}
                         | set(_threshold_lookup_columns(raw.get("threshold"))))
    base = load_survey(
        survey["path"],
        outcome_column=model["outcome"],
        outcome_type=outcome_type,
        covariate_columns=tuple(lookup_cols),
        threshold_column=(raw.get("threshold") or {}).get("column"),
        log_outcome=bool(model.get("log_outcome", False)),
    )
    if survey.get("project_lonlat", False):
        coords = equirect_project([loc.x for loc in base.locations],
                                  [loc.y for loc in base.locations])
        from .core import Location

        locs = tuple(Location(float(x), float(y), loc.id)
                     for (x, y), loc in zip(coords, base.locations))
        base = base.with_outcome(locations=locs)
    raw_columns = {name: base.covariates[:, i] for i, name in enumerate(base.covariate_names)}
    return _assemble_design(base, model, raw_columns), raw_columns


def _threshold_lookup_columns(thr_cfg):
    if not thr_cfg or "table" not in thr_cfg:
        return ()
    table = thr_cfg["table"]
    cols = [table.get("age", "age"), table.get("sex", "sex")]
    if table.get("pregnant"):
        cols.append(table["pregnant"])
    return tuple(cols)


def _threshold_rule(thr_cfg) -> ThresholdRule:
    if thr_cfg is None:
        raise ConfigError("this task requires a threshold section")
    log_scale = bool(thr_cfg.get("log_scale", False))
    if "scalar" in thr_cfg:
        return ThresholdRule(kind="scalar", value=float(thr_cfg["scalar"]), log_scale=log_scale)
    if "column" in thr_cfg:
        return ThresholdRule(kind="column", column=thr_cfg["column"], log_scale=log_scale)
    table = thr_cfg["table"]
    return ThresholdRule(
        kind="table", table=load_threshold_table(table["path"]),
        age_column=table.get("age", "age"), sex_column=table.get("sex", "sex"),
        pregnant_column=table.get("pregnant"), log_scale=log_scale,
    )


def _binary_dataset(cfg: RunConfig):
    """Continuous survey + threshold rule -> dichotomized dataset with the
    threshold column appended to the design when thresholds vary."""
    raw = cfg.raw
    dataset, raw_columns = _load_model_dataset(cfg, "continuous")
    rule = _threshold_rule(raw.get("threshold"))
    thresholds = resolve_thresholds(dataset, rule, raw_columns)
    binary = dichotomize(dataset, thresholds, log_scale=rule.log_scale)
    varying = np.unique(thresholds).size > 1
    if varying:
        binary = binary.with_outcome(
            covariates=np.column_stack([binary.covariates, thresholds]),
            covariate_names=tuple(binary.covariate_names) + ("threshold",),
        )
    return binary, varying


# ---------------------------------------------------------------------------
# Settings blocks
# ---------------------------------------------------------------------------

def _fit_options(cfg, which, **overrides) -> FitOptions:
    block = dict(cfg.raw.get("fit", {}).get(which, {}))
    block.update(overrides)
    return FitOptions(**{k: v for k, v in block.items()
                         if k in FitOptions.__dataclass_fields__})


def _integration_settings(cfg) -> LatentIntegrationSettings:
    block = dict(cfg.raw.get("fit", {}).get("binomial", {}))
    fields = LatentIntegrationSettings.__dataclass_fields__
    kwargs = {k: v for k, v in block.items() if k in fields}
    kwargs.setdefault("seed", cfg.seed)
    return LatentIntegrationSettings(**kwargs)


# ---------------------------------------------------------------------------
# Task implementations
# ---------------------------------------------------------------------------

def _fit_summary(fit: FitResult):
    out = {
        "model": fit.model, "converged": fit.converged, "iterations": fit.iterations,
        "loglik": fit.loglik, "grad_norm": fit.grad_norm, "message": fit.message,
        "estimates": {k: float(v) for k, v in fit.estimates.items()},
        "ci95": {k: [float(a), float(b)] for k, (a, b) in fit.ci95.items()},
    }
    if fit.threshold is not None:
        out["threshold"] = fit.threshold
    return out


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def task_simulate(cfg: RunConfig):
    sim = cfg.raw["simulate"]
    prm = sim["params"]
    params = ModelParams(alpha=float(prm["alpha"]), beta_gamma=prm.get("beta_gamma", []),
                         sigma2=float(prm["sigma2"]), tau2=float(prm["tau2"]),
                         phi=float(prm["phi"]))
    grid_kind = sim.get("grid", "unit225")
    if isinstance(grid_kind, str) and grid_kind in ("unit225", "extended450"):
        coords = generate_grid(grid_kind)
    else:
        coords, _ = load_grid(grid_kind)
    n_per_loc = int(sim.get("individuals_per_location", 1))
    loc_index = np.repeat(np.arange(coords.shape[0]), n_per_loc)
    dataset, _ = simulate_survey(coords, loc_index, None, params, seed=cfg.seed)
    out = cfg.output_dir / "survey.csv"
    if "threshold" in sim:
        dataset = dichotomize(dataset, float(sim["threshold"]))
    write_survey(dataset, out)
    return [out]


def task_fit_linear(cfg: RunConfig):
    dataset, _ = _load_model_dataset(cfg, "continuous")
    thr_cfg = cfg.raw.get("threshold")
    threshold = float(thr_cfg["scalar"]) if thr_cfg and "scalar" in thr_cfg else None
    fit = fit_linear(dataset, options=_fit_options(cfg, "linear", threshold=threshold))
    out = cfg.output_dir / "fit_linear.json"
    _write_json(out, _fit_summary(fit))
    return [out], fit, dataset


def task_fit_binomial(cfg: RunConfig):
    model = cfg.raw["model"]
    if model.get("outcome_type", "continuous") == "binary":
        dataset, _ = _load_model_dataset(cfg, "binary")
        varying = False
    else:
        dataset, varying = _binary_dataset(cfg)
    fit = fit_binomial(dataset, settings=_integration_settings(cfg),
                       options=_fit_options(cfg, "binomial", grad_tol=1e-4))
    out = cfg.output_dir / "fit_binomial.json"
    payload = _fit_summary(fit)
    payload["threshold_as_covariate"] = varying
    _write_json(out, payload)
    return [out], fit, dataset


def task_info_curve(cfg: RunConfig):
    block = dict(cfg.raw.get("info_curve", {}))
    fields = EfiSettings.__dataclass_fields__
    kwargs = {k: (tuple(v) if isinstance(v, list) else v)
              for k, v in block.items() if k in fields}
    kwargs.setdefault("seed", cfg.seed)
    rows = efi_curve(EfiSettings(**kwargs))
    out = cfg.output_dir / "info_curve.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha_t", "rho", "tau2", "i_y", "i_yt", "r"])
        for r in rows:
            writer.writerow([repr(r.alpha_t), repr(r.rho), repr(r.tau2),
                             repr(r.i_y), repr(r.i_yt), repr(r.r)])
    return [out]


def task_cld(cfg: RunConfig):
    _, fit_c, _ = task_fit_linear(cfg)
    if not fit_c.converged:
        raise DichogeoError(f"linear fit did not converge: {fit_c.message}")
    binary, varying = _binary_dataset(cfg)
    from .core import to_prevalence_scale_varying

    theta = (to_prevalence_scale_varying(fit_c.params) if varying
             else fit_c.prevalence)
    order = int(cfg.raw.get("cld", {}).get("quadrature_order", 20))
    report = cld(theta, binary, quadrature_order=order)
    out = cfg.output_dir / "cld.json"
    _write_json(out, {"logdet_continuous": report.logdet_continuous,
                      "logdet_binary": report.logdet_binary, "cld": report.cld,
                      "tau2_over_sigma2": fit_c.params.tau2 / fit_c.params.sigma2})
    return [out]


def task_predict(cfg: RunConfig):
    pred = cfg.raw["predict"]
    which = pred.get("model", "both")
    grid_coords, _ = load_grid(pred["grid"])
    n_samples = int(pred.get("n_cond_samples", 2000))
    thr = pred.get("exceedance_threshold")
    thr = float(thr) if thr is not None else None
    profile_cfg = pred.get("profile", {})
    outputs = []

    fits = {}
    datasets = {}
    if which in ("linear", "both"):
        _, fits["linear"], datasets["linear"] = task_fit_linear(cfg)
        outputs.append(cfg.output_dir / "fit_linear.json")
    if which in ("binomial", "both"):
        _, fits["binomial"], datasets["binomial"] = task_fit_binomial(cfg)
        outputs.append(cfg.output_dir / "fit_binomial.json")

    surfaces = {}
    for name, fit in fits.items():
        if not fit.converged:
            raise DichogeoError(f"{name} fit did not converge: {fit.message}")
        dataset = datasets[name]
        profile = _profile_vector(dataset, profile_cfg, cfg)
        result = predict_prevalence(fit, dataset, grid_coords, profile,
                                    n_cond_samples=n_samples, seed=cfg.seed,
                                    exceedance_threshold=thr)
        surfaces[name] = result
        path = cfg.output_dir / f"prevalence_{name}.csv"
        write_grid_predictions(path, grid_coords, result.prevalence_mean, result.exceedance)
        outputs.append(path)

    if len(surfaces) == 2:
        diff = surfaces["binomial"].prevalence_mean - surfaces["linear"].prevalence_mean
        path = cfg.output_dir / "prevalence_diff.csv"
        write_grid_predictions(path, grid_coords, diff)
        outputs.append(path)
        if thr is not None:
            ediff = surfaces["binomial"].exceedance - surfaces["linear"].exceedance
            path = cfg.output_dir / "exceedance_diff.csv"
            write_grid_predictions(path, grid_coords, ediff)
            outputs.append(path)
        fit_c, fit_b = fits["linear"], fits["binomial"]
        if fit_c.threshold is None and "beta_t_threshold" in fit_b.estimates:
            consistency = {"beta5_binomial": fit_b.estimates["beta_t_threshold"],
                           "one_over_tau_linear": 1.0 / float(np.sqrt(fit_c.params.tau2))}
            _write_json(cfg.output_dir / "bridge_consistency.json", consistency)
            outputs.append(cfg.output_dir / "bridge_consistency.json")
    return outputs


def _profile_vector(dataset: SurveyDataset, profile_cfg, cfg):
    """Covariate profile row matching the fitted design columns."""
    model = cfg.raw.get("model", {})
    values = {}
    for spec in model.get("covariates", []):
        if isinstance(spec, str):
            if spec not in profile_cfg:
                raise ConfigError(f"predict.profile missing value for covariate {spec!r}")
            values[spec] = float(profile_cfg[spec])
        else:
            col = spec["column"]
            if col not in profile_cfg:
                raise ConfigError(f"predict.profile missing value for covariate {col!r}")
            knots = spec.get("knots")
            if knots:
                basis = spline_design([float(profile_cfg[col])], SplineSpec(tuple(knots)))[0]
                values[col] = basis[0]
                for k, v in zip(knots, basis[1:]):
                    values[f"{col}_gt{k:g}"] = v
            else:
                values[col] = float(profile_cfg[col])
    row = []
    for name in dataset.covariate_names:
        if name == "threshold":
            if "threshold" not in profile_cfg:
                raise ConfigError("predict.profile must supply 'threshold' when the fit uses one")
            thr_cfg = cfg.raw.get("threshold") or {}
            val = float(profile_cfg["threshold"])
            row.append(np.log(val) if thr_cfg.get("log_scale", False) else val)
        elif name in values:
            row.append(values[name])
        else:
            raise ConfigError(f"predict.profile cannot resolve design column {name!r}")
    return np.array(row)


def task_sim_study(cfg: RunConfig):
    study = cfg.raw.get("sim_study", {})
    specs = []
    for tau2 in study.get("tau2", [0.5, 1.0, 2.0]):
        for phi in study.get("phi", [0.1, 0.2]):
            for c in study.get("c", [0.0, 0.2, 0.4]):
                specs.append(ScenarioSpec(
                    tau2=float(tau2), phi=float(phi), c=float(c),
                    grid=study.get("grid", "unit225"),
                    n_reps=int(study.get("n_reps", 200)), seed=cfg.seed,
                    allow_custom=bool(study.get("allow_custom", False)),
                ))
    checkpoint = study.get("checkpoint_dir")
    report = run_study(specs, workers=cfg.workers, checkpoint_dir=checkpoint)

    out_csv = cfg.output_dir / "sim_study.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    rows = report_rows(report)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau2", "phi", "c", "grid", "parameter", "model",
                         "bias", "mse", "mcse_bias", "mcse_mse", "n_ok", "n_failed"])
        for row in rows:
            writer.writerow([repr(row["tau2"]), repr(row["phi"]), repr(row["c"]), row["grid"],
                             row["parameter"], row["model"], repr(row["bias"]), repr(row["mse"]),
                             repr(row["mcse_bias"]), repr(row["mcse_mse"]),
                             row["n_ok"], row["n_failed"]])
    out_txt = cfg.output_dir / "sim_study_tables.txt"
    out_txt.write_text(format_tables(report) + "\n")
    return [out_csv, out_txt]


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digests(cfg: RunConfig):
    digests = {str(cfg.config_path): _sha256(cfg.config_path)}
    survey = cfg.raw.get("survey", {})
    if survey.get("path") and Path(survey["path"]).exists():
        digests[survey["path"]] = _sha256(survey["path"])
    thr = cfg.raw.get("threshold") or {}
    table = (thr.get("table") or {}).get("path")
    if table and Path(table).exists():
        digests[table] = _sha256(table)
    grid = cfg.raw.get("predict", {}).get("grid")
    if grid and Path(grid).exists():
        digests[grid] = _sha256(grid)
    return digests


def run(cfg: RunConfig) -> int:
    """Dispatch the configured task; returns a process exit status."""
    limit_blas_threads()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    handlers = {
        "simulate": lambda: task_simulate(cfg),
        "fit-linear": lambda: task_fit_linear(cfg)[0],
        "fit-binomial": lambda: task_fit_binomial(cfg)[0],
        "info-curve": lambda: task_info_curve(cfg),
        "cld": lambda: task_cld(cfg),
        "predict": lambda: task_predict(cfg),
        "sim-study": lambda: task_sim_study(cfg),
    }
    try:
        outputs = handlers[cfg.task]()
    except DichogeoError as exc:
        diag = cfg.output_dir / "error.txt"
        diag.write_text(f"{cfg.task} failed: {type(exc).__name__}: {exc}\n")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "task": cfg.task,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "settings": cfg.raw,
        "input_digests": _input_digests(cfg),
        "outputs": sorted(str(p) for p in outputs),
    }
    _write_json(cfg.output_dir / "manifest.json", manifest)
    for path in outputs:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dichogeo",
        description="Geostatistical prevalence modelling and dichotomization loss metrics",
    )
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True, help="path to the YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=None, help="override the worker count")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, task=args.task, seed=args.seed, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
