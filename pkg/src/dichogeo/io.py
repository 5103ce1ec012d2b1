"""CSV schemas: survey files, prediction grids and threshold tables.

One row per individual in survey files (loc_id, x, y, outcome, optional
threshold, covariate columns), header required, UTF-8, '.' decimal point.
Values are written with full repr precision so a write/load round trip is
exact.  All ingestion errors carry row/column coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Location, SurveyDataset
from .errors import SchemaError

RESERVED = ("loc_id", "x", "y")


def _parse_cell(raw, row_num, column):
    text = raw.strip() if isinstance(raw, str) else raw
    if text is None or text == "":
        raise SchemaError(f"row {row_num}: missing value in column {column!r}")
    try:
        return float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"row {row_num}: non-numeric value {raw!r} in column {column!r}")


def load_survey(path, outcome_column="outcome", outcome_type="continuous",
                covariate_columns=(), threshold_column=None,
                log_outcome=False) -> SurveyDataset:
    """Read and validate a survey CSV into a dataset.

    Rows with a missing outcome are rejected with row-numbered diagnostics;
    a loc_id appearing with conflicting coordinates is an integrity error.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"survey file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file (header row required)")
        header = [h.strip() for h in reader.fieldnames]
        required = list(RESERVED) + [outcome_column] + list(covariate_columns)
        if threshold_column:
            required.append(threshold_column)
        missing = [col for col in required if col not in header]
        if missing:
            raise SchemaError(f"{path}: missing required columns {missing} (header: {header})")

        loc_ids, loc_xy, loc_pos = [], {}, {}
        loc_of, outcomes, thresholds, cov_rows = [], [], [], []
        for row_num, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items()}
            lid = (row.get("loc_id") or "").strip()
            if not lid:
                raise SchemaError(f"row {row_num}: missing loc_id")
            x = _parse_cell(row.get("x"), row_num, "x")
            y = _parse_cell(row.get("y"), row_num, "y")
            if lid in loc_xy:
                if loc_xy[lid] != (x, y):
                    raise SchemaError(
                        f"row {row_num}: loc_id {lid!r} re-appears with different coordinates "
                        f"({x}, {y}) vs {loc_xy[lid]}"
                    )
            else:
                loc_xy[lid] = (x, y)
                loc_pos[lid] = len(loc_ids)
                loc_ids.append(lid)
            loc_of.append(loc_pos[lid])
            outcomes.append(_parse_cell(row.get(outcome_column), row_num, outcome_column))
            if threshold_column:
                thresholds.append(_parse_cell(row.get(threshold_column), row_num, threshold_column))
            cov_rows.append([_parse_cell(row.get(c), row_num, c) for c in covariate_columns])

    if not outcomes:
        raise SchemaError(f"{path}: no data rows")
    locations = tuple(Location(x=loc_xy[lid][0], y=loc_xy[lid][1], id=lid) for lid in loc_ids)
    outcome = np.array(outcomes)
    if outcome_type == "binary":
        kwargs = {"y_binary": outcome}
        if not np.isin(outcome, (0.0, 1.0)).all():
            bad = int(np.flatnonzero(~np.isin(outcome, (0.0, 1.0)))[0])
            raise SchemaError(f"row {bad + 2}: binary outcome must be 0 or 1, got {outcome[bad]}")
    elif outcome_type == "continuous":
        if log_outcome:
            if (outcome <= 0).any():
                bad = int(np.flatnonzero(outcome <= 0)[0])
                raise SchemaError(f"row {bad + 2}: cannot log-transform non-positive outcome {outcome[bad]}")
            outcome = np.log(outcome)
        kwargs = {"y": outcome}
    else:
        raise SchemaError(f"unknown outcome_type {outcome_type!r}")
    return SurveyDataset(
        locations=locations,
        loc_index=np.array(loc_of, dtype=int),
        covariates=np.array(cov_rows) if covariate_columns else np.zeros((len(outcomes), 0)),
        thresholds=np.array(thresholds) if threshold_column else None,
        covariate_names=tuple(covariate_columns),
        **kwargs,
    )


def write_survey(dataset: SurveyDataset, path, outcome_column="outcome"):
    """Write a dataset back to the survey CSV schema with full precision."""
    outcome = dataset.y if dataset.y is not None else dataset.y_binary
    if outcome is None:
        raise SchemaError("dataset has no outcomes to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(RESERVED) + [outcome_column]
    if dataset.thresholds is not None:
        header.append("threshold")
    header += list(dataset.covariate_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n_individuals):
            loc = dataset.locations[dataset.loc_index[i]]
            row = [loc.id or f"loc{dataset.loc_index[i]}", repr(float(loc.x)), repr(float(loc.y)),
                   repr(float(outcome[i]))]
            if dataset.thresholds is not None:
                row.append(repr(float(dataset.thresholds[i])))
            row += [repr(float(v)) for v in dataset.covariates[i]]
            writer.writerow(row)


def load_grid(path, covariate_columns=()):
    """Prediction-grid CSV: x, y plus optional covariate columns."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"grid file not found: {path}")
    coords, cov_rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in ("x", "y") + tuple(covariate_columns) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing grid columns {missing}")
        for row_num, row in enumerate(reader, start=2):
            coords.append([_parse_cell(row.get("x"), row_num, "x"),
                           _parse_cell(row.get("y"), row_num, "y")])
            cov_rows.append([_parse_cell(row.get(c), row_num, c) for c in covariate_columns])
    if not coords:
        raise SchemaError(f"{path}: no grid rows")
    cov = np.array(cov_rows) if covariate_columns else None
    return np.array(coords), cov


def write_grid_predictions(path, coords, prev_mean, exceed=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "prev_mean"] + (["exceed_prob"] if exceed is not None else []))
        for i, (x, y) in enumerate(np.asarray(coords)):
            row = [repr(float(x)), repr(float(y)), repr(float(prev_mean[i]))]
            if exceed is not None:
                row.append(repr(float(exceed[i])))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Threshold rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdTableRow:
    """One predicate row: half-open age interval, sex/pregnancy wildcards."""

    sex: str          # 'f', 'm' or 'any'
    age_min: float
    age_max: float    # exclusive
    pregnant: str     # '0', '1' or 'any'
    threshold: float

    def matches(self, age, sex, pregnant):
        if not (self.age_min <= age < self.age_max):
            return False
        if self.sex != "any" and sex != self.sex:
            return False
        if self.pregnant != "any" and f"{int(pregnant)}" != self.pregnant:
            return False
        return True


@dataclass(frozen=True)
class ThresholdRule:
    """Exactly one of: scalar value, per-row column, or predicate table."""

    kind: str                          # 'scalar' | 'column' | 'table'
    value: Optional[float] = None
    column: Optional[str] = None
    table: tuple = ()
    age_column: str = "age"
    sex_column: str = "sex"
    pregnant_column: Optional[str] = None
    log_scale: bool = False


def load_threshold_table(path):
    """Threshold-table CSV with columns sex, age_min, age_max, pregnant, threshold."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"threshold table not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        needed = ["sex", "age_min", "age_max", "pregnant", "threshold"]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: threshold table missing columns {missing}")
        for row_num, row in enumerate(reader, start=2):
            sex = (row.get("sex") or "any").strip().lower() or "any"
            preg = (row.get("pregnant") or "any").strip().lower() or "any"
            rows.append(ThresholdTableRow(
                sex=sex,
                age_min=_parse_cell(row.get("age_min"), row_num, "age_min"),
                age_max=_parse_cell(row.get("age_max"), row_num, "age_max"),
                pregnant=preg,
                threshold=_parse_cell(row.get("threshold"), row_num, "threshold"),
            ))
    if not rows:
        raise SchemaError(f"{path}: empty threshold table")
    return tuple(rows)


def resolve_thresholds(dataset: SurveyDataset, rule: ThresholdRule,
                       raw_columns: Optional[dict] = None):
    """Per-individual threshold vector under the configured rule.

    For the table rule, group membership is decided by the age/sex/pregnancy
    predicates with first-match-wins in file order; unmatched individuals
    raise with their lookup keys listed.  ``raw_columns`` supplies lookup
    columns that are not part of the model design.
    """
    n = dataset.n_individuals
    raw_columns = raw_columns or {}

    def column(name):
        if name in raw_columns:
            return np.asarray(raw_columns[name], dtype=float)
        if name in dataset.covariate_names:
            return dataset.covariates[:, dataset.covariate_names.index(name)]
        raise SchemaError(f"threshold rule needs column {name!r}, absent from the dataset")

    if rule.kind == "scalar":
        if rule.value is None or not np.isfinite(rule.value):
            raise SchemaError("scalar threshold rule needs a finite value")
        out = np.full(n, float(rule.value))
    elif rule.kind == "column":
        if dataset.thresholds is None:
            raise SchemaError("column threshold rule requires thresholds in the survey file")
        out = np.array(dataset.thresholds)
    elif rule.kind == "table":
        ages = column(rule.age_column)
        sexes = column(rule.sex_column)
        pregnant = (column(rule.pregnant_column) if rule.pregnant_column
                    else np.zeros(n))
        out = np.empty(n)
        unmatched = []
        for i in range(n):
            sex_code = "f" if sexes[i] == 0 else "m"
            for row in rule.table:
                if row.matches(ages[i], sex_code, pregnant[i]):
                    out[i] = row.threshold
                    break
            else:
                unmatched.append(f"row {i}: age={ages[i]}, sex={sex_code}, pregnant={int(pregnant[i])}")
        if unmatched:
            raise SchemaError("unmatched individuals in threshold table lookup: "
                              + "; ".join(unmatched[:10]))
    else:
        raise SchemaError(f"unknown threshold rule kind {rule.kind!r}")

    if rule.log_scale:
        if (out <= 0).any():
            raise SchemaError("cannot log-transform non-positive thresholds")
        out = np.log(out)
    return out
