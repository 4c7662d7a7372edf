"""Toy calibration of the crowd model to intraday covariance curves.

Three steps:

1. the across-day correlation of daily total net flows stands in for the
   correlation of the crowd's initial inventories;
2. the fundamental covariance per bin is a fixed fraction of the average
   observed curve, and a second fraction is a constant upward shift of the
   model curves;
3. with A fixed and alpha taken from the impact regression, the liquidity
   ratios k_i = V_i / eta_i, the risk aversion and the inventory variances
   Gamma_ii are fitted by least squares between model and observed curves.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .core.meanfield import mean_field_response
from .core.params import MarketParams, TimeGrid, check_positive_definite
from .covariance.estimators import estimate_covariance, flow_covariance
from .covariance.regression import fit_impact_regression
from .covariance.theory import theoretical_excess
from .errors import EstimationError, MissingInputError, ParameterError, SolverError
from .market_sim import InventoryLaw, MarketPanel

logger = logging.getLogger(__name__)

DEFAULT_BOUNDS = {"k": (1e5, 1e10), "gamma": (1e-6, 1.0), "Gamma": (0.0, 1e12)}


def e0_correlation_proxy(panel: MarketPanel) -> np.ndarray:
    """Across-day correlation of the daily total net flow of each asset."""
    if panel.net_flows is None:
        raise MissingInputError("the panel carries no net flows")
    if panel.n_days < 2:
        raise EstimationError("at least two days are needed")
    totals = panel.net_flows.sum(axis=1)
    dev = totals - totals.mean(axis=0)
    cov = dev.T @ dev / (panel.n_days - 1)
    sd = np.sqrt(np.diag(cov))
    if np.any(sd == 0):
        flat = [panel.assets[i] for i in np.flatnonzero(sd == 0)]
        raise EstimationError(f"daily total flow has zero variance for {flat}")
    R = cov / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


def fundamental_from_patterns(curves, fundamental_fraction=0.2, shift_fraction=0.3):
    """Per-pair (dt Sigma_hat, shift) as fractions of the time-averaged curve.

    ``curves`` has bins on the first axis; any trailing shape is kept.
    """
    curves = np.asarray(curves, dtype=float)
    if curves.size == 0 or curves.shape[0] == 0:
        raise EstimationError("no curves given")
    level = np.nanmean(curves, axis=0)
    return fundamental_fraction * level, shift_fraction * level


@dataclass
class CalibrationInputs:
    """Observed quantities the fit takes as given."""

    observed_C: np.ndarray  # (M, d, d) unconditioned covariance curves
    bin_times: np.ndarray
    alpha_hat: np.ndarray
    e0_corr: np.ndarray
    standard_errors: np.ndarray | None = None
    sigma_hat_regression: np.ndarray | None = None

    @property
    def d(self):
        return self.observed_C.shape[1]

    @property
    def n_bins(self):
        return self.observed_C.shape[0]


@dataclass
class CalibrationConfig:
    inputs: CalibrationInputs
    A_term: float = 10.0
    fundamental_fraction: float = 0.2
    shift_fraction: float = 0.3
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    n_restarts: int = 5
    max_evals: int = 4000
    steps_per_bin: int = 1
    seed: int = 0
    n_screen: int = 256

    def __post_init__(self):
        for name in ("fundamental_fraction", "shift_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ParameterError(f"{name} must lie in (0, 1)")
        if not self.A_term > 0:
            raise ParameterError("A_term must be > 0")
        for key in ("k", "gamma", "Gamma"):
            if key not in self.bounds:
                raise ParameterError(f"missing bounds for {key}")
            lo, hi = self.bounds[key]
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 <= lo < hi):
                raise ParameterError(f"infeasible bounds for {key}: {lo}, {hi}")
        if self.bounds["k"][0] <= 0 or self.bounds["gamma"][0] <= 0:
            raise ParameterError("k and gamma bounds must be strictly positive")
        if self.n_restarts < 1 or self.max_evals < 10:
            raise ParameterError("need at least one restart and ten evaluations")
        if self.n_screen < 0:
            raise ParameterError("n_screen must be >= 0")


@dataclass
class CalibrationResult:
    k: np.ndarray
    gamma: float
    Gamma_diag: np.ndarray
    residual_l2: float
    objective: float
    evaluations: int
    converged: bool
    restarts: list
    trace: np.ndarray  # best objective after each evaluation of the winning restart
    fixed: dict
    provenance: dict
    noise_floor_l2: float | None = None

    def to_dict(self) -> dict:
        out = {
            "fitted": {
                "k": [float(v) for v in self.k],
                "gamma": float(self.gamma),
                "Gamma_diag": [float(v) for v in self.Gamma_diag],
            },
            "residual_l2": float(self.residual_l2),
            "objective": float(self.objective),
            "evaluations": int(self.evaluations),
            "converged": bool(self.converged),
            "restarts": self.restarts,
            "fixed": self.fixed,
            "provenance": self.provenance,
        }
        if self.noise_floor_l2 is not None:
            out["noise_floor_l2"] = float(self.noise_floor_l2)
        return out


def prepare_inputs(panel: MarketPanel) -> CalibrationInputs:
    """Estimate everything the fit treats as observed from one panel."""
    from .covariance.estimators import covariance_standard_errors

    series = estimate_covariance(panel)
    F = flow_covariance(panel)
    dt_bin = panel.bin_length()
    alpha, sigma = np.empty(panel.d), np.empty(panel.d)
    for i in range(panel.d):
        fit = fit_impact_regression(series.C[:, i, i], F[:, i, i], dt_bin)
        if fit.alpha_sq <= 0:
            raise EstimationError(f"non-positive impact estimate for {panel.assets[i]}")
        alpha[i], sigma[i] = fit.alpha_hat, fit.sigma_hat
    return CalibrationInputs(
        observed_C=series.C,
        bin_times=panel.bin_times,
        alpha_hat=alpha,
        e0_corr=e0_correlation_proxy(panel),
        standard_errors=covariance_standard_errors(panel),
        sigma_hat_regression=sigma,
    )


class _Objective:
    """Sum of squared gaps between shifted model curves and observations.

    Parameters live in the unit box: log k_i, log gamma and sqrt(Gamma_ii)
    mapped affinely onto [0, 1].
    """

    def __init__(self, config: CalibrationConfig):
        inp = config.inputs
        self.config = config
        self.d = d = inp.d
        M = inp.n_bins
        T = float(inp.bin_times[-1] - inp.bin_times[0])
        self.grid = TimeGrid(M * config.steps_per_bin, T)
        self.dt_bin = T / M
        fund, shift = fundamental_from_patterns(inp.observed_C, config.fundamental_fraction, config.shift_fraction)
        self.fund_level, self.shift = fund, shift
        self.Sigma_hat = fund / self.dt_bin
        self.Sigma_hat = 0.5 * (self.Sigma_hat + self.Sigma_hat.T)
        check_positive_definite(self.Sigma_hat, "fundamental covariance estimate")
        self.iu = np.triu_indices(d)
        self.obs = inp.observed_C[:, self.iu[0], self.iu[1]]
        self.scale = float(np.sum(self.obs**2)) or 1.0
        b = config.bounds
        self.lo = np.array([np.log(b["k"][0])] * d + [np.log(b["gamma"][0])] + [np.sqrt(b["Gamma"][0])] * d)
        self.hi = np.array([np.log(b["k"][1])] * d + [np.log(b["gamma"][1])] + [np.sqrt(b["Gamma"][1])] * d)
        corr = np.asarray(inp.e0_corr, dtype=float)
        self.e0_corr = corr

    def decode(self, u):
        z = self.lo + np.clip(u, 0.0, 1.0) * (self.hi - self.lo)
        d = self.d
        return np.exp(z[:d]), float(np.exp(z[d])), z[d + 1 :] ** 2

    def encode(self, k, gamma, Gamma_diag):
        z = np.concatenate([np.log(k), [np.log(gamma)], np.sqrt(Gamma_diag)])
        return (z - self.lo) / (self.hi - self.lo)

    def params(self, k, gamma):
        d = self.d
        return MarketParams.from_covariance(
            self.Sigma_hat, V=k, eta=np.ones(d), alpha=self.config.inputs.alpha_hat,
            A_term=np.full(d, self.config.A_term), gamma=gamma, T=self.grid.T,
        )

    def model_curves(self, k, gamma, Gamma_diag):
        p = self.params(k, gamma)
        s = np.sqrt(Gamma_diag)
        law = InventoryLaw(Gamma=self.e0_corr * np.outer(s, s))
        resp = mean_field_response(p, self.grid)
        pred = theoretical_excess(p, law, self.grid, self.config.inputs.n_bins, response=resp)
        return pred.total + self.shift[None]

    def sum_squares(self, k, gamma, Gamma_diag):
        model = self.model_curves(k, gamma, Gamma_diag)[:, self.iu[0], self.iu[1]]
        return float(np.sum((model - self.obs) ** 2))

    def __call__(self, u):
        try:
            return self.sum_squares(*self.decode(u)) / self.scale
        except (SolverError, ParameterError):
            return np.inf


def _map(fn, items, threads):
    """Ordered map, on a thread pool when threads > 1."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _run_restart(obj: _Objective, u0, max_evals):
    trace = []

    def f(u):
        val = obj(u)
        trace.append(val)
        return val

    d = len(u0)
    simplex = [u0] + [np.clip(u0 + 0.1 * np.eye(d)[i] * (1 if u0[i] < 0.9 else -1), 0, 1) for i in range(d)]
    res = minimize(
        f, u0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * d,
        options={"maxfev": max_evals, "xatol": 1e-6, "fatol": 1e-12, "initial_simplex": np.array(simplex), "adaptive": True},
    )
    best = np.minimum.accumulate(np.asarray(trace)) if trace else np.array([np.inf])
    return res, best


def calibrate(config: CalibrationConfig, threads: int = 1, start=None) -> CalibrationResult:
    """Least-squares fit of (k, gamma, Gamma_diag) with screened, restarted simplex search.

    The objective is first evaluated on ``n_screen`` scrambled Sobol points of
    the box (seeded by ``config.seed``).  Restart 0 starts at ``start``
    (k, gamma, Gamma_diag) when given, otherwise at the centre of the box; the
    other restarts start at the best screening points.  The winning restart is
    then polished by one more simplex run from its end point.  Ties go to the
    lowest index.
    """
    obj = _Objective(config)
    n_par = 2 * obj.d + 1
    starts = [np.full(n_par, 0.5) if start is None else obj.encode(*start)]
    n_more = config.n_restarts - 1
    n_screened = 0
    if n_more > 0:
        if config.n_screen >= n_more:
            pts = qmc.Sobol(n_par, scramble=True, seed=np.random.default_rng(config.seed)).random(config.n_screen)
            scores = _map(obj, list(pts), threads)
            n_screened = len(pts)
            order = np.argsort(np.where(np.isfinite(scores), scores, np.inf), kind="stable")
            starts += [pts[i] for i in order[:n_more]]
        else:
            rng = np.random.default_rng(config.seed)
            starts += [rng.uniform(0.05, 0.95, n_par) for _ in range(n_more)]

    def one(u0):
        return _run_restart(obj, u0, config.max_evals)

    runs = _map(one, starts, threads)
    values = [r.fun for r, _ in runs]
    best_idx = int(np.argmin(values))  # argmin returns the first minimum
    res, trace = runs[best_idx]
    if not np.isfinite(res.fun):
        raise SolverError("calibration objective is not finite anywhere it was evaluated")
    polish, polish_trace = _run_restart(obj, res.x, config.max_evals)
    runs.append((polish, polish_trace))
    if polish.fun < res.fun:
        res, trace = polish, np.minimum(polish_trace, trace[-1])
    k, gamma, Gamma_diag = obj.decode(res.x)
    ss = obj.sum_squares(k, gamma, Gamma_diag)
    converged = bool(res.status == 0)
    if not converged:
        logger.warning("calibration stopped on its evaluation budget: %s", res.message)
    floor = None
    se = config.inputs.standard_errors
    if se is not None:
        floor = float(np.sqrt(np.sum(se[:, obj.iu[0], obj.iu[1]] ** 2)))
    inp = config.inputs
    fixed = {
        "A_term": config.A_term,
        "alpha": [float(a) for a in inp.alpha_hat],
        "e0_corr": np.asarray(inp.e0_corr).tolist(),
        "dt_Sigma": obj.fund_level.tolist(),
        "shift": obj.shift.tolist(),
        "fundamental_fraction": config.fundamental_fraction,
        "shift_fraction": config.shift_fraction,
        "bounds": {key: list(map(float, v)) for key, v in config.bounds.items()},
    }
    provenance = {
        "A_term": "fixed by configuration",
        "alpha": "impact regression on the observed panel",
        "e0_corr": "correlation of daily total net flows",
        "dt_Sigma": "fraction of the time-averaged observed curves",
        "shift": "fraction of the time-averaged observed curves",
        "k": "fitted",
        "gamma": "fitted",
        "Gamma_diag": "fitted",
    }
    restarts = [
        {"index": i, "objective": float(r.fun), "evaluations": int(r.nfev), "status": int(r.status)}
        for i, (r, _) in enumerate(runs)
    ]
    return CalibrationResult(
        k=k, gamma=gamma, Gamma_diag=Gamma_diag, residual_l2=float(np.sqrt(ss)), objective=float(res.fun),
        evaluations=n_screened + int(sum(r.nfev for r, _ in runs)), converged=converged, restarts=restarts, trace=trace,
        fixed=fixed, provenance=provenance, noise_floor_l2=floor,
    )
