"""Realized intraday covariance estimators on day x bin panels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EstimationError, MissingInputError
from ..market_sim import MarketPanel


@dataclass
class CovarianceSeries:
    """Per-bin covariance C[k] and correlation R[k] (NaN where undefined).

    ``counts[k, i, j]`` is the number of days entering entry (i, j) of bin k;
    ``defined`` marks entries with at least two days.
    """

    C: np.ndarray  # (M, d, d)
    R: np.ndarray
    counts: np.ndarray
    defined: np.ndarray
    bin_times: np.ndarray | None = None

    @property
    def n_bins(self):
        return self.C.shape[0]

    @property
    def n_days_used(self):
        """Days used per bin on the diagonal (equal to N when unconditioned)."""
        return np.einsum("kii->ki", self.counts).min(axis=1)


def _masked_cov(X, Y, mask):
    """Across-day covariance of X and Y over the days selected by ``mask``.

    X, Y: (N, M); mask: (N, M) boolean.  Per-set means, N_sel - 1 normalisation.
    Returns (cov, count); cov is NaN where fewer than two days are selected.
    """
    n = mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = np.where(mask, X, 0.0).sum(axis=0) / n
        my = np.where(mask, Y, 0.0).sum(axis=0) / n
        prod = np.where(mask, (X - mx) * (Y - my), 0.0).sum(axis=0)
        cov = prod / (n - 1)
    cov = np.where(n >= 2, cov, np.nan)
    return cov, n


def _series(inc, select):
    """Covariance series for increments inc (N, M, d); ``select(i, j)`` gives the day mask."""
    N, M, d = inc.shape
    C = np.full((M, d, d), np.nan)
    counts = np.zeros((M, d, d), dtype=int)
    for i in range(d):
        for j in range(i, d):
            cov, n = _masked_cov(inc[:, :, i], inc[:, :, j], select(i, j))
            C[:, i, j] = C[:, j, i] = cov
            counts[:, i, j] = counts[:, j, i] = n
    defined = counts >= 2
    return C, counts, defined


def correlation_from_covariance(C):
    """R_ij = C_ij / sqrt(C_ii C_jj); NaN when a variance is zero or undefined."""
    C = np.asarray(C, dtype=float)
    diag = np.einsum("...ii->...i", C)
    denom = np.sqrt(diag[..., :, None] * diag[..., None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.where(denom > 0, C / denom, np.nan)
    R = np.clip(R, -1.0, 1.0)
    idx = np.arange(C.shape[-1])
    R[..., idx, idx] = np.where(diag > 0, 1.0, np.nan)
    return R


def _require_days(panel: MarketPanel):
    if panel.n_days < 2:
        raise EstimationError("at least two days are needed to estimate a covariance")
    panel.bin_length()


def estimate_covariance(panel: MarketPanel) -> CovarianceSeries:
    """Across-day covariance of bin price increments, per bin."""
    _require_days(panel)
    inc = panel.increments()
    everything = np.ones(inc.shape[:2], dtype=bool)
    C, counts, defined = _series(inc, lambda i, j: everything)
    return CovarianceSeries(C=C, R=correlation_from_covariance(C), counts=counts, defined=defined, bin_times=panel.bin_times)


def covariance_standard_errors(panel: MarketPanel) -> np.ndarray:
    """Monte Carlo standard error of each C[k, i, j]: std of the per-day products / sqrt(N)."""
    _require_days(panel)
    inc = panel.increments()
    N = inc.shape[0]
    dev = inc - inc.mean(axis=0)
    prod = np.einsum("lki,lkj->lkij", dev, dev)
    return prod.std(axis=0, ddof=1) / np.sqrt(N)


def _require_flows(panel: MarketPanel):
    if panel.net_flows is None:
        raise MissingInputError("the panel carries no net flows")


def flow_covariance(panel: MarketPanel) -> np.ndarray:
    """Across-day covariance of bin net flows, F[k, i, j] (diagonal: variance)."""
    _require_flows(panel)
    if panel.n_days < 2:
        raise EstimationError("at least two days are needed to estimate a covariance")
    nu = panel.net_flows
    dev = nu - nu.mean(axis=0)
    return np.einsum("lki,lkj->kij", dev, dev) / (panel.n_days - 1)


@dataclass
class Imbalances:
    """Trade imbalances w[l, k, i]; assets that never trade are excluded (NaN)."""

    w: np.ndarray
    excluded: np.ndarray  # (d,) bool
    scale: np.ndarray  # mean over days of the daily absolute flow


def trade_imbalances(panel: MarketPanel) -> Imbalances:
    """w = nu / mean_l sum_k |nu|, per asset."""
    _require_flows(panel)
    nu = panel.net_flows
    scale = np.abs(nu).sum(axis=1).mean(axis=0)
    excluded = ~(scale > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(excluded[None, None, :], np.nan, nu / np.where(excluded, 1.0, scale))
    return Imbalances(w=w, excluded=excluded, scale=scale)


def conditioned_covariance(panel: MarketPanel, lam, imbalances: Imbalances | None = None) -> CovarianceSeries:
    """Covariance over the days where both |w^i| <= lam and |w^j| <= lam in that bin.

    ``lam=None`` or ``inf`` applies no condition and reproduces
    estimate_covariance exactly, as does any lam >= max |w|.
    """
    _require_days(panel)
    inc = panel.increments()
    if lam is None or np.isinf(lam):
        everything = np.ones(inc.shape[:2], dtype=bool)
        C, counts, defined = _series(inc, lambda i, j: everything)
    else:
        imb = imbalances or trade_imbalances(panel)
        ok = np.abs(imb.w) <= lam  # NaN compares False: excluded assets select nothing
        C, counts, defined = _series(inc, lambda i, j: ok[:, :, i] & ok[:, :, j])
    return CovarianceSeries(C=C, R=correlation_from_covariance(C), counts=counts, defined=defined, bin_times=panel.bin_times)


@dataclass
class ConditionedPattern:
    """Median normalized intraday patterns for one conditioning level.

    ``lam`` is None for the unconditioned pattern.  Bins where every entry is
    undefined hold NaN and are listed in ``empty_bins``.
    """

    lam: float | None
    C_diag: np.ndarray
    C_off: np.ndarray
    counts_diag: np.ndarray
    counts_off: np.ndarray
    empty_bins: np.ndarray


def _median_over(values, ok):
    vals = np.where(ok, values, np.nan)
    has = ok.any(axis=1)
    out = np.full(values.shape[0], np.nan)
    if has.any():
        out[has] = np.nanmedian(vals[has], axis=1)
    return out


def median_patterns(panel: MarketPanel, lambdas, reference: CovarianceSeries | None = None) -> list[ConditionedPattern]:
    """Median over assets (diag) and pairs (off) of C_k(lam) / mean_k C_k, per bin.

    The normaliser is the unconditioned covariance (``reference``), i.e. the
    curve with no imbalance filter.  Pairs whose normaliser is zero or
    undefined are left out.
    """
    ref = reference or estimate_covariance(panel)
    d = panel.d
    norm = np.nanmean(ref.C, axis=0)
    iu = np.triu_indices(d, 1)
    usable = np.isfinite(norm) & (norm != 0)
    imb = trade_imbalances(panel) if panel.net_flows is not None else None
    out = []
    for lam in lambdas:
        unconditioned = lam is None or np.isinf(lam)
        series = ref if unconditioned else conditioned_covariance(panel, lam, imb)
        with np.errstate(invalid="ignore", divide="ignore"):
            scaled = series.C / np.where(usable, norm, 1.0)
        diag_ok = series.defined[:, np.arange(d), np.arange(d)] & usable[np.arange(d), np.arange(d)][None, :]
        off_ok = series.defined[:, iu[0], iu[1]] & usable[iu][None, :]
        C_diag = _median_over(np.einsum("kii->ki", scaled), diag_ok)
        C_off = _median_over(scaled[:, iu[0], iu[1]], off_ok) if d > 1 else np.full(series.n_bins, np.nan)
        counts_diag = np.median(np.einsum("kii->ki", series.counts), axis=1)
        counts_off = np.median(series.counts[:, iu[0], iu[1]], axis=1) if d > 1 else np.zeros(series.n_bins)
        empty = np.flatnonzero(~diag_ok.any(axis=1))
        out.append(ConditionedPattern(lam=None if unconditioned else float(lam), C_diag=C_diag, C_off=C_off,
                                      counts_diag=counts_diag, counts_off=counts_off, empty_bins=empty))
    return out
