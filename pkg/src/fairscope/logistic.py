"""Binary logistic regression by iteratively reweighted least squares, with the
same sensitive-level comparison layer as the linear module, expressed on the
probability scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .errors import DataError, FitError
from .linear import ComparisonRow, SComparisonReport, _pair_p_value, _point_dict
from .tabular import DesignMatrix, ModelSpec, Table, build_design

#: |standardized coefficient| beyond which the fit is treated as separated.
SEPARATION_BOUND = 30.0


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(eta / 2.0))


def _deviance(y: np.ndarray, eta: np.ndarray) -> float:
    # -2 log likelihood, computed without forming exp(eta) directly
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def _check_rank(X: np.ndarray, names: tuple[str, ...]) -> None:
    _, r, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(X.shape) * np.finfo(np.float64).eps
    rank = int(np.count_nonzero(diag > tol))
    if rank < X.shape[1]:
        raise FitError(f"design is rank deficient: column {names[piv[rank]]!r} is collinear")


def irls_fit(
    X: np.ndarray,
    y: np.ndarray,
    penalty: np.ndarray | None = None,
    names: tuple[str, ...] | None = None,
    max_iterations: int = 50,
    deviance_tol: float = 1e-9,
    score_tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, int, float, list[float]]:
    """Core (optionally ridge-penalized) IRLS solver.

    Newton steps with step-halving whenever the penalized deviance would
    increase; stops once the relative deviance change is below `deviance_tol`
    and the gradient max-norm is below `score_tol`. Returns
    (beta, covariance, iterations, final deviance change, deviance trace).
    """
    n, p = X.shape
    if n <= p:
        raise FitError(f"need more rows than design columns ({n} rows, {p} columns)")
    names = names or tuple(f"x{j}" for j in range(p))
    _check_rank(X, names)
    pen = np.zeros(p) if penalty is None else np.asarray(penalty, dtype=np.float64)
    col_sd = X.std(axis=0, ddof=1) if n > 1 else np.zeros(p)

    beta = np.zeros(p)
    eta = X @ beta
    dev = _deviance(y, eta) + float(pen @ beta**2)
    trace = [dev]
    final_change = np.inf

    for iteration in range(1, max_iterations + 1):
        probs = _sigmoid(eta)
        w = probs * (1.0 - probs)
        if float(w.max()) < 1e-12:
            raise FitError("separation detected: all working weights underflow")
        hessian = X.T @ (X * w[:, None]) + np.diag(2.0 * pen)
        score = X.T @ (y - probs) - 2.0 * pen * beta
        try:
            delta = sla.solve(hessian, score, assume_a="pos")
        except sla.LinAlgError as exc:
            raise FitError(f"IRLS weighted system is singular: {exc}") from exc

        step = 1.0
        while True:
            candidate = beta + step * delta
            cand_eta = X @ candidate
            cand_dev = _deviance(y, cand_eta) + float(pen @ candidate**2)
            if cand_dev <= dev + 1e-12 or step < 1e-10:
                break
            step /= 2.0

        final_change = abs(dev - cand_dev) / max(abs(dev), 1.0)
        beta, eta, dev = candidate, cand_eta, cand_dev
        trace.append(dev)

        standardized = np.abs(beta) * col_sd
        if float(standardized.max(initial=0.0)) > SEPARATION_BOUND:
            worst = int(np.argmax(standardized))
            raise FitError(
                f"separation detected: standardized coefficient of {names[worst]!r} "
                f"exceeds {SEPARATION_BOUND:g}"
            )

        probs = _sigmoid(eta)
        score_norm = float(np.max(np.abs(X.T @ (y - probs) - 2.0 * pen * beta)))
        if final_change < deviance_tol and score_norm < score_tol:
            w = probs * (1.0 - probs)
            hessian = X.T @ (X * w[:, None]) + np.diag(2.0 * pen)
            covariance = sla.inv(hessian)
            covariance = (covariance + covariance.T) / 2.0
            return beta, covariance, iteration, final_change, trace

    raise FitError(f"IRLS did not converge within {max_iterations} iterations")


@dataclass(frozen=True)
class LogitFit:
    """A converged logistic fit plus its design metadata for scoring new rows."""

    coefficient_names: tuple[str, ...]
    estimates: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    covariance: np.ndarray
    iterations: int
    final_deviance_change: float
    deviance_trace: tuple[float, ...]
    fitted: np.ndarray
    design: DesignMatrix

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


def fit_logit(design: DesignMatrix, y01: np.ndarray) -> LogitFit:
    """Fit a binary logit; covariance is (X'WX)^-1 at convergence."""
    y = np.asarray(y01, dtype=np.float64)
    classes = np.unique(y)
    if not np.isin(classes, (0.0, 1.0)).all():
        raise DataError("logit response must be coded 0/1")
    if classes.size < 2:
        raise DataError("logit response must contain both classes")
    beta, cov, iters, change, trace = irls_fit(design.matrix, y, names=design.column_names)
    se = np.sqrt(np.diag(cov))
    z = np.where(se > 0, beta / se, 0.0)
    p_values = 2.0 * stats.norm.sf(np.abs(z))
    return LogitFit(
        coefficient_names=design.column_names,
        estimates=beta,
        standard_errors=se,
        p_values=p_values,
        covariance=cov,
        iterations=iters,
        final_deviance_change=change,
        deviance_trace=tuple(trace),
        fitted=_sigmoid(design.matrix @ beta),
        design=design,
    )


def predict_prob(fit: LogitFit, table: Table) -> np.ndarray:
    """Probabilities 1/(1+exp(-x'beta)) for each encodable row."""
    return _sigmoid(fit.design.encode_rows(table) @ fit.estimates)


@dataclass(frozen=True)
class LogitSModel:
    """Pooled or per-level logistic fits over the sensitive variable."""

    spec: ModelSpec
    interactions: bool
    levels: tuple[str, ...]
    pooled: LogitFit | None = None
    by_level: dict[str, LogitFit] | None = None

    def predict(self, table: Table) -> np.ndarray:
        if not self.interactions:
            return predict_prob(self.pooled, table)
        labels = table.column(self.spec.s_name).labels()
        out = np.empty(table.nrows)
        for level in np.unique(labels):
            if level not in self.by_level:
                raise DataError(f"sensitive level {level!r} has no per-level fit")
            idx = np.flatnonzero(labels == level)
            out[idx] = predict_prob(self.by_level[level], table.subset(idx))
        return out


def fit_logistic(table: Table, spec: ModelSpec, interactions: bool = False) -> LogitSModel:
    """Fit the pooled (S as dummies) or per-level (interactions) logistic model."""
    spec = spec.resolve(table)
    if spec.s_name is None:
        raise DataError("a sensitive column is required")
    s_col = table.column(spec.s_name)
    if not s_col.is_factor:
        raise DataError(f"sensitive column {spec.s_name!r} must be a factor")
    levels = tuple(sorted({s_col.levels[k] for k in np.unique(s_col.values)}))

    if not interactions:
        design, y = build_design(table, spec, include_s=True)
        return LogitSModel(spec, False, levels, pooled=fit_logit(design, y))

    labels = s_col.labels()
    by_level = {}
    for level in levels:
        sub = table.subset(np.flatnonzero(labels == level))
        design, y = build_design(sub, spec, include_s=False)
        by_level[level] = fit_logit(design, y)
    return LogitSModel(spec, True, levels, by_level=by_level)


def compare_levels_logit(model: LogitSModel, points: Table) -> SComparisonReport:
    """Per-point probability differences between per-level logistic fits.

    Standard errors use the delta method with gradient p(1-p) x per fit; the
    fits are independent so the two variance terms add.
    """
    if not model.interactions or model.by_level is None:
        raise DataError("compare_levels_logit requires a model fitted with interactions")
    encoded = {
        level: fit.design.encode_rows(points) for level, fit in model.by_level.items()
    }
    rows = []
    for i in range(points.nrows):
        point = _point_dict(points, i, model.spec.x_names)
        for a, b in combinations(model.levels, 2):
            fit_a, fit_b = model.by_level[a], model.by_level[b]
            xa, xb = encoded[a][i], encoded[b][i]
            pa = float(_sigmoid(xa @ fit_a.estimates))
            pb = float(_sigmoid(xb @ fit_b.estimates))
            ga = pa * (1.0 - pa) * xa
            gb = pb * (1.0 - pb) * xb
            var = float(ga @ fit_a.covariance @ ga + gb @ fit_b.covariance @ gb)
            se = float(np.sqrt(max(var, 0.0)))
            est = pa - pb
            rows.append(ComparisonRow(a, b, est, se, _pair_p_value(est, se), point))
    return SComparisonReport(tuple(rows), scale="probability")
