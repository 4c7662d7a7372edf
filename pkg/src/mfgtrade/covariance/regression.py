"""Market-impact regression of bin variances on bin flow variances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import EstimationError


@dataclass
class RegressionFit:
    """OLS fit of C_k = intercept + alpha_sq * F_k.

    The intercept is read as dt_bin * Sigma, so ``sigma_sq_hat`` is the
    intercept per unit time; ``sigma_hat`` its square root when positive.
    """

    alpha_sq: float
    intercept: float
    dt_bin: float
    se_alpha_sq: float
    se_intercept: float
    t_alpha_sq: float
    pvalue_alpha_sq: float
    pvalue_intercept: float
    corr_cf: float
    dof: int
    residual_norm: float

    @property
    def alpha_hat(self) -> float:
        return float(np.sqrt(max(self.alpha_sq, 0.0)))

    @property
    def sigma_sq_hat(self) -> float:
        return self.intercept / self.dt_bin

    @property
    def sigma_hat(self) -> float:
        return float(np.sqrt(max(self.sigma_sq_hat, 0.0)))

    def alpha_sq_interval(self, level=0.95):
        """Two-sided t interval for the slope."""
        q = stats.t.ppf(0.5 + level / 2, self.dof)
        return self.alpha_sq - q * self.se_alpha_sq, self.alpha_sq + q * self.se_alpha_sq


def fit_impact_regression(C_series, F_series, dt_bin: float) -> RegressionFit:
    """Least squares with intercept; t-based standard errors and two-sided p-values."""
    C = np.asarray(C_series, dtype=float).ravel()
    F = np.asarray(F_series, dtype=float).ravel()
    if C.shape != F.shape:
        raise EstimationError("C and F series must have the same length")
    keep = np.isfinite(C) & np.isfinite(F)
    C, F = C[keep], F[keep]
    n = C.size
    if n < 3:
        raise EstimationError("at least three bins are needed for the regression")
    if not dt_bin > 0:
        raise EstimationError("bin length must be positive")
    Fc = F - F.mean()
    sxx = float(Fc @ Fc)
    if sxx <= 1e-300 * max(1.0, float(F @ F)) or np.ptp(F) == 0:
        raise EstimationError("flow variance series is constant; the slope is undefined")
    X = np.column_stack([np.ones(n), F])
    coef, *_ = np.linalg.lstsq(X, C, rcond=None)
    intercept, slope = float(coef[0]), float(coef[1])
    resid = C - X @ coef
    dof = n - 2
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    se_int, se_slope = float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1]))

    def pval(est, se):
        if se == 0:
            return 0.0 if est != 0 else 1.0
        return float(2.0 * stats.t.sf(abs(est / se), dof))

    Cc = C - C.mean()
    denom = np.sqrt(sxx * float(Cc @ Cc))
    corr = float(np.clip(Fc @ Cc / denom, -1.0, 1.0)) if denom > 0 else float("nan")
    return RegressionFit(
        alpha_sq=slope,
        intercept=intercept,
        dt_bin=float(dt_bin),
        se_alpha_sq=se_slope,
        se_intercept=se_int,
        t_alpha_sq=slope / se_slope if se_slope > 0 else float("inf"),
        pvalue_alpha_sq=pval(slope, se_slope),
        pvalue_intercept=pval(intercept, se_int),
        corr_cf=corr,
        dof=dof,
        residual_norm=float(np.linalg.norm(resid)),
    )


def bootstrap_alpha_sq(panel, n_draws=200, seed=0, level=0.95):
    """Day-resampling standard error and normal interval for each asset's slope.

    Whole days are resampled, so dependence between bins of the same day and
    bin-to-bin changes in noise level are carried into the interval.
    Returns (alpha_sq, se, lower, upper), each of length d.
    """
    from ..covariance.estimators import estimate_covariance, flow_covariance

    if panel.net_flows is None:
        raise EstimationError("the panel carries no net flows")
    if n_draws < 2:
        raise EstimationError("at least two bootstrap draws are needed")
    dt_bin = panel.bin_length()
    C, F = estimate_covariance(panel).C, flow_covariance(panel)
    d, N = panel.d, panel.n_days
    point = np.array([fit_impact_regression(C[:, i, i], F[:, i, i], dt_bin).alpha_sq for i in range(d)])
    inc, nu = panel.increments(), panel.net_flows
    rng = np.random.default_rng(seed)
    draws = np.empty((n_draws, d))
    for b in range(n_draws):
        idx = rng.integers(0, N, N)
        di = inc[idx] - inc[idx].mean(axis=0)
        dn = nu[idx] - nu[idx].mean(axis=0)
        Cb = np.einsum("lki,lki->ki", di, di) / (N - 1)
        Fb = np.einsum("lki,lki->ki", dn, dn) / (N - 1)
        for i in range(d):
            draws[b, i] = fit_impact_regression(Cb[:, i], Fb[:, i], dt_bin).alpha_sq
    se = draws.std(axis=0, ddof=1)
    z = stats.norm.ppf(0.5 + level / 2)
    return point, se, point - z * se, point + z * se
