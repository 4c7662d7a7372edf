"""Closed-form per-bin covariance implied by the identical-preference model.

With E0 ~ N(mean, Gamma) independent of the price noise, the bin price
change is alpha_i * int_bin mu^i + noise, and int_bin mu is linear in E0.
Hence

    C_k = (bin length) Sigma + diag(alpha) Phi_k Gamma Phi_k^T diag(alpha)

where Phi_k maps E0 to the inventory change of the crowd over bin k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core.meanfield import MeanFieldResponse, _linear_coefficient, mean_field_response
from ..core.params import MarketParams, TimeGrid
from ..core.riccati import solve_riccati
from ..errors import ParameterError
from ..market_sim import InventoryLaw


@dataclass
class ExcessPrediction:
    """Predicted per-bin covariance split into fundamental and crowd parts.

    The correlation identity R = rho * A + B holds entrywise, with A and B
    using the predicted total covariance in their denominators.
    """

    bin_times: np.ndarray
    fundamental: np.ndarray  # (M, d, d)
    excess: np.ndarray
    flow_map: np.ndarray  # Phi_k, (M, d, d)
    A: np.ndarray
    B: np.ndarray

    @property
    def total(self):
        return self.fundamental + self.excess

    @property
    def correlation(self):
        from .estimators import correlation_from_covariance

        return correlation_from_covariance(self.total)


def bin_edges(grid: TimeGrid, bins) -> np.ndarray:
    """Node indices of the bin boundaries.

    ``bins`` is either the number of bins (must divide the grid) or an
    explicit increasing sequence of node indices starting at 0 and ending at N.
    """
    N = grid.n_steps
    if np.isscalar(bins):
        M = int(bins)
        if M < 1 or N % M:
            raise ParameterError(f"{M} bins do not divide a grid of {N} steps")
        return np.arange(0, N + 1, N // M)
    edges = np.asarray(bins, dtype=int)
    if edges[0] != 0 or edges[-1] != N or np.any(np.diff(edges) <= 0):
        raise ParameterError("bin edges must increase strictly from 0 to n_steps")
    return edges


def theoretical_excess(params: MarketParams, law: InventoryLaw, grid: TimeGrid, bins,
                       response: MeanFieldResponse | None = None, extra_price_cov=None) -> ExcessPrediction:
    """Fundamental and excess covariance for every bin.

    ``extra_price_cov`` (per day) adds an independent price noise to the
    fundamental part, matching the simulator option of the same name.
    """
    if law.d != params.d:
        raise ParameterError("inventory law and market have different dimensions")
    edges = bin_edges(grid, bins)
    resp = response or mean_field_response(params, grid)
    x = resp.x  # (N+1, d, d)
    Phi = x[edges[1:]] - x[edges[:-1]]
    lengths = grid.nodes[edges[1:]] - grid.nodes[edges[:-1]]
    base = np.asarray(params.Sigma)
    if extra_price_cov is not None:
        base = base + np.asarray(extra_price_cov, dtype=float)
    fundamental = lengths[:, None, None] * base[None]
    flow_cov = Phi @ law.Gamma @ np.swapaxes(Phi, 1, 2)
    a = params.alpha
    excess = a[None, :, None] * flow_cov * a[None, None, :]
    excess = 0.5 * (excess + np.swapaxes(excess, 1, 2))
    total = fundamental + excess
    diag = np.einsum("kii->ki", total)
    denom = np.sqrt(diag[:, :, None] * diag[:, None, :])
    sig = np.sqrt(np.diag(params.Sigma))
    with np.errstate(invalid="ignore", divide="ignore"):
        A = np.where(denom > 0, lengths[:, None, None] * np.outer(sig, sig)[None] / denom, np.nan)
        B = np.where(denom > 0, (total - lengths[:, None, None] * params.Sigma[None]) / denom, np.nan)
    return ExcessPrediction(bin_times=grid.nodes[edges], fundamental=fundamental, excess=excess, flow_map=Phi, A=A, B=B)


def predicted_flow_covariance(params: MarketParams, law: InventoryLaw, grid: TimeGrid, bins,
                              response: MeanFieldResponse | None = None) -> np.ndarray:
    """Phi_k Gamma Phi_k^T: the across-day covariance of bin net flows."""
    pred = theoretical_excess(params, law, grid, bins, response)
    F = pred.flow_map @ law.Gamma @ np.swapaxes(pred.flow_map, 1, 2)
    return 0.5 * (F + np.swapaxes(F, 1, 2))


@dataclass
class PiThetaDecomposition:
    """Covariance contributions of the feedback and anticipation parts of the crowd flow.

    mu = nu1 + nu2 with nu1 = 2 Vq H E and nu2 = 2 Vq Hs.  ``PP``, ``TT``,
    ``PT`` and ``TP`` are the across-day covariances of the bin integrals of
    (nu1, nu1), (nu2, nu2), (nu1, nu2) and (nu2, nu1).  Written with the
    integrals pi = int H E and theta = int Hs, each carries the prefactor
    V_i V_j / (4 eta_i eta_j).
    """

    PP: np.ndarray
    TT: np.ndarray
    PT: np.ndarray
    TP: np.ndarray
    prefactor: np.ndarray

    @property
    def flow_covariance(self):
        return self.PP + self.TT + self.PT + self.TP


def decompose_pi_theta(params: MarketParams, law: InventoryLaw, grid: TimeGrid, bins,
                       response: MeanFieldResponse | None = None) -> PiThetaDecomposition:
    """Diagnostic split of the flow covariance; integrals use the trapezoid rule on the solver grid."""
    edges = bin_edges(grid, bins)
    resp = response or mean_field_response(params, grid)
    riccati = solve_riccati(params, grid)
    d, dt = params.d, grid.dt
    Vq = params.liquidity
    # per unit E0 vector l: pi-type flow 2 Vq H x and theta-type flow 2 Vq Hs(mu = y)
    nu1 = 2.0 * Vq[None, :, None] * np.einsum("kij,kjl->kil", riccati.H, resp.x)
    nu2 = np.empty_like(nu1)
    for col in range(d):
        Hs = _linear_coefficient(riccati, params.alpha, resp.y[:, :, col], grid)
        nu2[:, :, col] = 2.0 * Vq * Hs

    def bin_integral(f):
        trap = 0.5 * dt * (f[1:] + f[:-1])
        csum = np.concatenate([np.zeros((1,) + f.shape[1:]), np.cumsum(trap, axis=0)])
        return csum[edges[1:]] - csum[edges[:-1]]

    P1, P2 = bin_integral(nu1), bin_integral(nu2)
    G = law.Gamma
    cov = lambda X, Y: X @ G @ np.swapaxes(Y, 1, 2)  # noqa: E731
    prefactor = np.outer(params.V, params.V) / (4.0 * np.outer(params.eta, params.eta))
    return PiThetaDecomposition(PP=cov(P1, P1), TT=cov(P2, P2), PT=cov(P1, P2), TP=cov(P2, P1), prefactor=prefactor)
