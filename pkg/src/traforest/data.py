"""Training-set container and the survival CSV format.

CSV layout: columns ``lower`` and ``upper`` hold the response bounds
(exact: lower == upper; right-censored: upper empty or ``inf``;
left-censored: lower empty or ``0``; interval: lower < upper), an optional
``treatment`` column in {0, 1}, and every other column is a numeric covariate.
"""
import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Optional

import numpy as np

from .likelihood import Responses, Subject


class SchemaError(ValueError):
    pass


@dataclass
class SurvData:
    resp: Responses
    X: np.ndarray
    treatment: Optional[np.ndarray] = None
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.X, float)
        if X.ndim != 2:
            X = X.reshape(len(self.resp), -1)
        self.X = np.ascontiguousarray(X)
        if self.X.shape[0] != len(self.resp):
            raise ValueError("covariate rows do not match the number of responses")
        if not self.names:
            self.names = [f"x{j + 1}" for j in range(self.X.shape[1])]
        if len(self.names) != self.X.shape[1]:
            raise ValueError("covariate names do not match the number of columns")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("covariates must be finite")
        if self.treatment is not None:
            self.treatment = np.asarray(self.treatment, float).reshape(-1)
            if not np.all(np.isin(self.treatment, (0.0, 1.0))):
                raise ValueError("treatment must be 0 or 1")

    def __len__(self):
        return len(self.resp)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SurvData":
        idx = np.asarray(idx)
        return SurvData(self.resp[idx], self.X[idx], None if self.treatment is None else self.treatment[idx],
                        list(self.names))

    def subjects(self) -> List[Subject]:
        out = []
        for i in range(len(self)):
            r = None if self.treatment is None else int(self.treatment[i])
            out.append(Subject(self.resp[i], self.X[i], r))
        return out

    @classmethod
    def from_subjects(cls, subjects, names=None) -> "SurvData":
        resp = Responses.from_list([s.response for s in subjects])
        X = np.array([np.asarray(s.covariates, float) for s in subjects]).reshape(len(subjects), -1)
        r = [s.treatment for s in subjects]
        tr = None if any(v is None for v in r) else np.asarray(r, float)
        return cls(resp, X, tr, list(names or []))


def _parse_bound(text: str, default: float, row: int, col: str) -> float:
    s = text.strip()
    if s == "":
        return default
    try:
        v = float(s)
    except ValueError:
        raise SchemaError(f"row {row}, column {col!r}: not a number: {text!r}") from None
    if math.isnan(v):
        raise SchemaError(f"row {row}, column {col!r}: NaN is not allowed")
    return v


def read_csv(path, require_treatment: bool = False) -> SurvData:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header required") from None
        rows = list(reader)
    return parse_rows(header, rows, require_treatment, source=str(path))


def parse_rows(header, rows, require_treatment=False, source="<data>") -> SurvData:
    for col in ("lower", "upper"):
        if col not in header:
            raise SchemaError(f"{source}: missing required column {col!r}")
    has_tr = "treatment" in header
    if require_treatment and not has_tr:
        raise SchemaError(f"{source}: predictive model needs a 'treatment' column")
    cov_names = [h for h in header if h not in ("lower", "upper", "treatment")]
    pos = {h: j for j, h in enumerate(header)}
    lower, upper, tr, X = [], [], [], []
    for k, row in enumerate(rows, start=1):
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SchemaError(f"{source}: row {k} has {len(row)} fields, expected {len(header)}")
        lo = _parse_bound(row[pos["lower"]], 0.0, k, "lower")
        hi = _parse_bound(row[pos["upper"]], math.inf, k, "upper")
        if lo < 0 or hi <= 0 or lo > hi or (lo == 0 and hi == math.inf):
            raise SchemaError(f"{source}: row {k}, columns 'lower'/'upper': invalid bounds ({lo}, {hi})")
        lower.append(lo)
        upper.append(hi)
        if has_tr:
            v = row[pos["treatment"]].strip()
            if v not in ("0", "1", "0.0", "1.0"):
                raise SchemaError(f"{source}: row {k}, column 'treatment': expected 0 or 1, got {v!r}")
            tr.append(float(v))
        xs = []
        for name in cov_names:
            s = row[pos[name]].strip()
            try:
                val = float(s)
            except ValueError:
                raise SchemaError(f"{source}: row {k}, column {name!r}: not numeric: {s!r} "
                                  "(expand categorical columns with `traforest ingest`)") from None
            if not math.isfinite(val):
                raise SchemaError(f"{source}: row {k}, column {name!r}: covariates must be finite")
            xs.append(val)
        X.append(xs)
    n = len(lower)
    resp = Responses.from_bounds(lower, upper) if n else Responses(np.zeros(0, int), np.zeros(0), np.zeros(0))
    Xa = np.asarray(X, float).reshape(n, len(cov_names))
    return SurvData(resp, Xa, np.asarray(tr) if has_tr else None, cov_names)


def write_csv(path, data: SurvData):
    header = ["lower", "upper"] + (["treatment"] if data.treatment is not None else []) + list(data.names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(data)):
            hi = data.resp.upper[i]
            row = [repr(float(data.resp.lower[i])), "inf" if hi == math.inf else repr(float(hi))]
            if data.treatment is not None:
                row.append(str(int(data.treatment[i])))
            row += [repr(float(v)) for v in data.X[i]]
            w.writerow(row)


def one_hot(header, rows, categorical=None):
    """Expand non-numeric covariate columns into 0/1 indicator columns (first
    level dropped, levels sorted).  ``categorical`` forces columns to be
    treated as factors."""
    categorical = set(categorical or [])
    reserved = {"lower", "upper", "treatment"}
    out_header, columns = [], []
    for j, name in enumerate(header):
        col = [r[j].strip() for r in rows]
        if name in reserved:
            out_header.append(name)
            columns.append(col)
            continue
        numeric = name not in categorical
        if numeric:
            try:
                [float(v) for v in col]
            except ValueError:
                numeric = False
        if numeric:
            out_header.append(name)
            columns.append(col)
            continue
        levels = sorted(set(col))
        for lev in levels[1:]:
            out_header.append(f"{name}.{lev}")
            columns.append(["1" if v == lev else "0" for v in col])
    out_rows = [list(r) for r in zip(*columns)] if columns else []
    return out_header, out_rows


def load_gbsg2() -> SurvData:
    """German Breast Cancer Study Group 2 data (686 patients, right-censored
    recurrence-free survival in days).  Factors are coded numerically:
    horTh and menostat as 0/1 (yes / Post = 1), tgrade ordinally as 1..3.
    ``treatment`` is hormonal therapy (horTh)."""
    text = resources.files("traforest").joinpath("data/gbsg2.csv").read_text()
    rows = list(csv.reader(text.splitlines()))
    header, rows = rows[0], rows[1:]
    pos = {h: j for j, h in enumerate(header)}
    grade = {"I": 1.0, "II": 2.0, "III": 3.0}
    names = ["horTh", "age", "menostat", "tsize", "tgrade", "pnodes", "progrec", "estrec"]
    X, time, event = [], [], []
    for r in rows:
        X.append([1.0 if r[pos["horTh"]] == "yes" else 0.0, float(r[pos["age"]]),
                  1.0 if r[pos["menostat"]] == "Post" else 0.0, float(r[pos["tsize"]]),
                  grade[r[pos["tgrade"]]], float(r[pos["pnodes"]]), float(r[pos["progrec"]]),
                  float(r[pos["estrec"]])])
        time.append(float(r[pos["time"]]))
        event.append(r[pos["cens"]] == "1")
    X = np.asarray(X)
    resp = Responses.right_censored(np.asarray(time), np.asarray(event))
    return SurvData(resp, X, X[:, 0].copy(), names)
