"""Backward matrix Riccati equation for the quadratic value-function term.

The coefficient H(t) solves

    dH/dt = -2 H Vq H + gamma * Sigma,     H(T) = -2 A,

with Vq = diag(V_i / (4 eta_i)).  The coefficients are constant, so on every
step the equation is integrated exactly through its associated linear system
(H = Y X^-1 with [X; Y]' = M [X; Y]).  This stays stable where explicit
Runge-Kutta steps blow up: near T the linearisation has rates of order
4 A Vq, routinely 1e7-1e8 per day.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ..errors import ParameterError, SolverError
from .params import MarketParams, TimeGrid

BOUND_RTOL = 1e-9


def _generator(liquidity, gamma, Sigma):
    # linear system in backward time tau = T - t
    d = liquidity.shape[0]
    M = np.zeros((2 * d, 2 * d))
    M[:d, d:] = -2.0 * np.diag(liquidity)
    M[d:, :d] = -gamma * Sigma
    return M


def _advance(Phi, H, repeat=1):
    # H may be a single matrix or a stack (..., d, d)
    d = H.shape[-1]
    for _ in range(repeat):
        X = Phi[:d, :d] + Phi[:d, d:] @ H
        Y = Phi[d:, :d] + Phi[d:, d:] @ H
        H = np.swapaxes(np.linalg.solve(np.swapaxes(X, -1, -2), np.swapaxes(Y, -1, -2)), -1, -2)
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return H


def _substeps(liquidity, gamma, Sigma, h):
    # keep the Hamiltonian growth factor exp(h * rate) of order e per substep
    root_v = np.sqrt(liquidity)
    rate = np.sqrt(max(2.0 * gamma * np.linalg.eigvalsh(root_v[:, None] * Sigma * root_v[None, :]).max(), 0.0))
    return max(1, int(np.ceil(h * rate)))


def _step_map(liquidity, gamma, Sigma, h):
    n = _substeps(liquidity, gamma, Sigma, h)
    return expm((h / n) * _generator(liquidity, gamma, Sigma)), n


@dataclass
class RiccatiPath:
    """Values of H at the grid nodes, plus what is needed to evaluate between them."""

    grid: TimeGrid
    H: np.ndarray  # (N+1, d, d)
    liquidity: np.ndarray
    gamma: float
    Sigma: np.ndarray
    A_term: np.ndarray
    _step_factors: np.ndarray | None = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.H.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        """H(t) for any t in [0, T], propagated exactly from the next node."""
        grid = self.grid
        if not -1e-12 <= t <= grid.T + 1e-12:
            raise ParameterError(f"t={t} outside [0, {grid.T}]")
        k = min(int(np.ceil(t / grid.dt - 1e-12)), grid.n_steps)
        h = grid.nodes[k] - t
        if h <= 0:
            return self.H[k].copy()
        Phi, n = _step_map(self.liquidity, self.gamma, self.Sigma, h)
        return _advance(Phi, self.H[k], n)

    def feedback(self) -> np.ndarray:
        """2 Vq H(t_k) at every node: the inventory feedback matrix."""
        return 2.0 * self.liquidity[None, :, None] * self.H

    def offset_values(self, frac: float) -> np.ndarray:
        """H(t_k + frac * dt) for k = 0..N-1, each propagated exactly from t_{k+1}."""
        if not 0.0 <= frac <= 1.0:
            raise ParameterError("frac must lie in [0, 1]")
        h = (1.0 - frac) * self.grid.dt
        if h == 0:
            return self.H[1:].copy()
        Phi, n = _step_map(self.liquidity, self.gamma, self.Sigma, h)
        return _advance(Phi, self.H[1:], n)

    def step_factors(self) -> np.ndarray:
        """Psi(t_k, t_{k+1}) for k < N, where d/dw Psi(t, w) = Psi(t, w) 2 H(w) Vq.

        Each factor uses the fourth-order Magnus expansion with two Gauss
        points; H at the Gauss points comes from exact propagation.
        """
        if self._step_factors is None:
            h = self.grid.dt
            c1, c2 = 0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6
            B1 = 2.0 * self.offset_values(c1) * self.liquidity[None, None, :]
            B2 = 2.0 * self.offset_values(c2) * self.liquidity[None, None, :]
            omega = 0.5 * h * (B1 + B2) + (np.sqrt(3) / 12) * h * h * (B1 @ B2 - B2 @ B1)
            self._step_factors = expm(omega)
        return self._step_factors

    def state_transition(self, t_index: int, w_index: int) -> np.ndarray:
        """Psi(t_k, t_m): the ordered exponential of int_t^w 2 H(s) Vq ds."""
        if not 0 <= t_index <= w_index <= self.grid.n_steps:
            raise ParameterError(f"need 0 <= t_index <= w_index <= {self.grid.n_steps}")
        psi = np.eye(self.d)
        factors = self.step_factors()
        for m in range(t_index, w_index):
            psi = psi @ factors[m]
        return psi


def solve_riccati(params: MarketParams, grid: TimeGrid, gamma=None, A_term=None) -> RiccatiPath:
    """Integrate the Riccati equation backward from H(T) = -2A.

    ``gamma`` and ``A_term`` override the market-wide values (agent classes).
    Raises SolverError if the path leaves the a-priori band
    -2A - T gamma Sigma <= H <= 0.
    """
    if abs(grid.T - params.T) > 1e-12 * params.T:
        raise ParameterError(f"grid horizon {grid.T} differs from params.T {params.T}")
    gamma = params.gamma if gamma is None else float(gamma)
    A = params.A_term if A_term is None else np.asarray(A_term, dtype=float)
    Vq = params.liquidity
    Sigma = np.asarray(params.Sigma)
    d, N = params.d, grid.n_steps

    Phi, n_sub = _step_map(Vq, gamma, Sigma, grid.dt)
    H = np.empty((N + 1, d, d))
    H[N] = -2.0 * np.diag(A)
    for k in range(N - 1, -1, -1):
        try:
            H[k] = _advance(Phi, H[k + 1], n_sub)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"Riccati step failed at t={grid.nodes[k]:.6g}: {exc}") from exc
        if not np.all(np.isfinite(H[k])):
            raise SolverError(f"Riccati integration produced non-finite values at t={grid.nodes[k]:.6g}")

    path = RiccatiPath(grid=grid, H=H, liquidity=Vq, gamma=gamma, Sigma=Sigma, A_term=A)
    check_riccati_bounds(path, params.T)
    return path


def check_riccati_bounds(path: RiccatiPath, T: float, rtol=BOUND_RTOL):
    lower = -2.0 * np.diag(path.A_term) - T * path.gamma * path.Sigma
    scale = np.abs(np.linalg.eigvalsh(lower)).max()
    top = np.linalg.eigvalsh(path.H).max(axis=1)
    gap = np.linalg.eigvalsh(path.H - lower).min(axis=1)
    worst_top, worst_gap = top.max(), gap.min()
    if worst_top > rtol * scale or worst_gap < -rtol * scale:
        k = int(np.argmax(top)) if worst_top > rtol * scale else int(np.argmin(gap))
        raise SolverError(
            "Riccati solution left the band -2A - T gamma Sigma <= H <= 0 "
            f"at t={path.grid.nodes[k]:.6g} (max eigenvalue {worst_top:.3g}, "
            f"min eigenvalue above lower bound {worst_gap:.3g})"
        )


def propagator_G(riccati: RiccatiPath, params: MarketParams, grid: TimeGrid, t_index: int, w_index: int) -> np.ndarray:
    """G(t, w) = Psi(t, w) diag(alpha): how anticipated flow at w feeds speed at t."""
    if grid != riccati.grid:
        raise ParameterError("grid does not match the Riccati path")
    return riccati.state_transition(t_index, w_index) * params.alpha[None, :]


def commutator_defect(riccati: RiccatiPath, t_index: int, w_index: int) -> float:
    """Relative size of [H(t) Vq, sum_{t<=s<w} H(s) Vq dt].

    Zero whenever the matrices H(s) Vq share an eigenbasis; the ordered
    exponential in ``state_transition`` does not rely on it.
    """
    Vq = np.diag(riccati.liquidity)
    a = riccati.H[t_index] @ Vq
    b = riccati.H[t_index:w_index].sum(axis=0) @ Vq * riccati.grid.dt
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a @ b - b @ a) / denom)
