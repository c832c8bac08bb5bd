"""Least squares with classical or sandwich covariance, plus sensitive-level
comparisons: pairwise dummy contrasts without interactions, or per-point
differences between separate per-level fits when interactions are requested.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .errors import DataError, FitError
from .tabular import DesignMatrix, ModelSpec, Table, build_design


@dataclass(frozen=True)
class FitSummary:
    """Coefficients, their covariance, and derived inference for one fit."""

    coefficient_names: tuple[str, ...]
    estimates: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    covariance: np.ndarray
    residual_variance: float
    df_residual: int
    sandwich_used: bool

    def coefficient(self, name: str) -> float:
        return float(self.estimates[self.coefficient_names.index(name)])

    def standard_error(self, name: str) -> float:
        return float(self.standard_errors[self.coefficient_names.index(name)])

    def to_json_dict(self) -> list[dict]:
        return [
            {
                "covariate": name,
                "estimate": float(est),
                "standardError": float(se),
                "pValue": float(p),
            }
            for name, est, se, p in zip(
                self.coefficient_names, self.estimates, self.standard_errors, self.p_values
            )
        ]


def fit_ols(design: DesignMatrix, y: np.ndarray, sandwich: bool = False) -> FitSummary:
    """Fit least squares via pivoted QR.

    Classical covariance is s^2 (X'X)^-1 with s^2 = RSS/(n-p); the sandwich
    variant is HC0: (X'X)^-1 X' diag(e^2) X (X'X)^-1. Coefficient p-values are
    two-sided t with n-p degrees of freedom.
    """
    X = design.matrix
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if n <= p:
        raise FitError(f"need more rows than design columns ({n} rows, {p} columns)")

    q, r, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(n, p) * np.finfo(np.float64).eps
    rank = int(np.count_nonzero(diag > tol))
    if rank < p:
        offending = design.column_meta[piv[rank]].name
        raise FitError(f"design is rank deficient: column {offending!r} is collinear")

    beta_piv = sla.solve_triangular(r, q.T @ y)
    beta = np.empty(p)
    beta[piv] = beta_piv

    residuals = y - X @ beta
    rss = float(residuals @ residuals)
    df = n - p
    s2 = rss / df

    r_inv = sla.solve_triangular(r, np.eye(p))
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = r_inv @ r_inv.T
    if sandwich:
        xe = X * residuals[:, None]
        cov = xtx_inv @ (xe.T @ xe) @ xtx_inv
    else:
        cov = s2 * xtx_inv
    cov = (cov + cov.T) / 2.0

    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, beta / se, np.inf * np.sign(beta))
    p_values = 2.0 * stats.t.sf(np.abs(tstat), df)

    return FitSummary(
        coefficient_names=design.column_names,
        estimates=beta,
        standard_errors=se,
        p_values=p_values,
        covariance=cov,
        residual_variance=s2,
        df_residual=df,
        sandwich_used=sandwich,
    )


@dataclass(frozen=True)
class ComparisonRow:
    level_a: str
    level_b: str
    estimate: float
    standard_error: float
    p_value: float
    comparison_point: dict | None = None

    def to_json_dict(self) -> dict:
        row = {
            "factorsCompared": f"{self.level_a} - {self.level_b}",
            "estimate": self.estimate,
            "standardError": self.standard_error,
            "pValue": self.p_value,
        }
        if self.comparison_point is not None:
            row["comparisonPoint"] = self.comparison_point
        return row


@dataclass(frozen=True)
class SComparisonReport:
    """Pairwise sensitive-level effect estimates, optionally per comparison point."""

    rows: tuple[ComparisonRow, ...]
    scale: str = "response"

    def to_json_dict(self) -> dict:
        return {"scale": self.scale, "rows": [r.to_json_dict() for r in self.rows]}


@dataclass(frozen=True)
class LinearSModel:
    """A fitted linear model with sensitive-level structure.

    Without interactions there is a single pooled fit with S entering as
    dummies. With interactions there is one fit per S level, each trained on
    that level's rows only and excluding S from its design.
    """

    spec: ModelSpec
    interactions: bool
    levels: tuple[str, ...]
    pooled: FitSummary | None = None
    pooled_design: DesignMatrix | None = None
    by_level: dict[str, tuple[FitSummary, DesignMatrix]] | None = None

    def predict(self, table: Table) -> np.ndarray:
        if not self.interactions:
            return self.pooled_design.encode_rows(table) @ self.pooled.estimates
        s_col = table.column(self.spec.s_name)
        labels = s_col.labels()
        out = np.empty(table.nrows)
        for level in np.unique(labels):
            if level not in self.by_level:
                raise DataError(f"sensitive level {level!r} has no per-level fit")
            fit, design = self.by_level[level]
            idx = np.flatnonzero(labels == level)
            out[idx] = design.encode_rows(table.subset(idx)) @ fit.estimates
        return out


def fit_linear(
    table: Table, spec: ModelSpec, interactions: bool = False, sandwich: bool = False
) -> LinearSModel:
    """Fit the pooled (S as dummies) or per-level (interactions) linear model."""
    spec = spec.resolve(table)
    if spec.s_name is None:
        raise DataError("a sensitive column is required")
    s_col = table.column(spec.s_name)
    if not s_col.is_factor:
        raise DataError(f"sensitive column {spec.s_name!r} must be a factor")
    levels = tuple(sorted({s_col.levels[k] for k in np.unique(s_col.values)}))

    if not interactions:
        design, y = build_design(table, spec, include_s=True)
        fit = fit_ols(design, y, sandwich=sandwich)
        return LinearSModel(spec, False, levels, pooled=fit, pooled_design=design)

    labels = s_col.labels()
    by_level = {}
    for level in levels:
        sub = table.subset(np.flatnonzero(labels == level))
        design, y = build_design(sub, spec, include_s=False)
        by_level[level] = (fit_ols(design, y, sandwich=sandwich), design)
    return LinearSModel(spec, True, levels, by_level=by_level)


def _pair_p_value(estimate: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if estimate != 0.0 else 1.0
    return float(2.0 * stats.norm.sf(abs(estimate) / se))


def compare_levels(model: LinearSModel) -> SComparisonReport:
    """All pairwise level differences from a no-interaction fit.

    The reference level's coefficient is 0; pair variance comes from the
    fitted coefficient covariance. P-values are two-sided normal.
    """
    if model.interactions or model.pooled is None:
        raise DataError("compare_levels requires a model fitted without interactions")
    fit = model.pooled
    s = model.spec.s_name
    names = fit.coefficient_names

    def position(level: str) -> int | None:
        name = f"{s}{level}"
        return names.index(name) if name in names else None

    rows = []
    for a, b in combinations(model.levels, 2):
        ia, ib = position(a), position(b)
        est = (fit.estimates[ia] if ia is not None else 0.0) - (
            fit.estimates[ib] if ib is not None else 0.0
        )
        var = 0.0
        if ia is not None:
            var += fit.covariance[ia, ia]
        if ib is not None:
            var += fit.covariance[ib, ib]
        if ia is not None and ib is not None:
            var -= 2.0 * fit.covariance[ia, ib]
        se = float(np.sqrt(max(var, 0.0)))
        rows.append(ComparisonRow(a, b, float(est), se, _pair_p_value(est, se)))
    return SComparisonReport(tuple(rows))


def _point_dict(table: Table, i: int, x_names: tuple[str, ...]) -> dict:
    point = {}
    for name in x_names:
        col = table.column(name)
        point[name] = str(col.labels()[i]) if col.is_factor else float(col.values[i])
    return point


def compare_levels_at(model: LinearSModel, points: Table) -> SComparisonReport:
    """Per-point level differences from a with-interactions fit.

    At a point x the pair (a, b) difference is x'beta_a - x'beta_b; the two
    per-level fits are independent so variances add. P-values are two-sided
    normal.
    """
    if not model.interactions or model.by_level is None:
        raise DataError("compare_levels_at requires a model fitted with interactions")
    encoded = {
        level: design.encode_rows(points) for level, (_, design) in model.by_level.items()
    }
    rows = []
    for i in range(points.nrows):
        point = _point_dict(points, i, model.spec.x_names)
        for a, b in combinations(model.levels, 2):
            fit_a, _ = model.by_level[a]
            fit_b, _ = model.by_level[b]
            xa, xb = encoded[a][i], encoded[b][i]
            est = float(xa @ fit_a.estimates - xb @ fit_b.estimates)
            var = float(xa @ fit_a.covariance @ xa + xb @ fit_b.covariance @ xb)
            se = float(np.sqrt(max(var, 0.0)))
            rows.append(ComparisonRow(a, b, est, se, _pair_p_value(est, se), point))
    return SComparisonReport(tuple(rows))
