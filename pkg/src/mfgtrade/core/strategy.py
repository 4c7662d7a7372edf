"""Individual optimal strategies inside a solved mean field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from .meanfield import LinearBVP, MeanFieldSolution
from .params import MarketParams


def speed_components(t_index: int, q, solution: MeanFieldSolution):
    """Split the optimal speed into (v1, v2).

    v1 = 2 Vq H(t) q is the Almgren-Chriss feedback on the investor's own
    inventory; v2 = 2 Vq Hs(t) is the reaction to the anticipated market flow.
    """
    N = solution.grid.n_steps
    if not 0 <= t_index <= N:
        raise ParameterError(f"t_index must lie in [0, {N}]")
    q = np.asarray(q, dtype=float)
    Vq = solution.liquidity
    v1 = 2.0 * Vq * (solution.riccati.H[t_index] @ q)
    v2 = 2.0 * Vq * solution.Hs[t_index]
    return v1, v2


def optimal_speed(t_index: int, q, solution: MeanFieldSolution) -> np.ndarray:
    """Optimal trading speed v*(t_k, q) = 2 Vq H(t_k) q + 2 Vq Hs(t_k)."""
    v1, v2 = speed_components(t_index, q, solution)
    return v1 + v2


def mean_field_speed(t_index: int, q, solution: MeanFieldSolution) -> np.ndarray:
    """The same rule written around the crowd: E'(t) + 2 Vq H(t) (q - E(t))."""
    q = np.asarray(q, dtype=float)
    dev = q - solution.E[t_index]
    return solution.Edot[t_index] + 2.0 * solution.liquidity * (solution.riccati.H[t_index] @ dev)


@dataclass
class AgentTrajectory:
    """Inventory, speed and cash of one investor on the solver grid.

    ``v`` is the feedback rule at each node; ``trades[k]`` is the inventory
    change over [t_k, t_{k+1}] and is what the cash account pays for.
    """

    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    trades: np.ndarray
    cash: np.ndarray
    prices: np.ndarray
    reward_terminal: float


def impacted_prices(solution: MeanFieldSolution, params: MarketParams, S0=100.0) -> np.ndarray:
    """Noise-free mid prices S0 + alpha * int_0^t mu, with mu held at node values."""
    dt = solution.grid.dt
    S = np.empty_like(solution.mu)
    S[0] = S0
    S[1:] = S0 + params.alpha * np.cumsum(solution.mu[:-1] * dt, axis=0)
    return S


def simulate_agent(q0, solution: MeanFieldSolution, params: MarketParams, price_path=None, S0=100.0) -> AgentTrajectory:
    """Follow the optimal feedback from inventory q0.

    The investor's rule is v = E' + 2 Vq H (q - E): the crowd's speed plus the
    Almgren-Chriss feedback on the deviation z = q - E.  z solves the same
    discrete boundary problem as the crowd with the flow coupling removed
    (z'' = 2 gamma Vq Sigma z, z'(T) + 4 Vq A z(T) = 0), so q advances with the
    scheme's one-step rule q_k = q_{k-1} + dt v_{k-1}, stays stable at any
    stiffness, and q0 = E0 reproduces E exactly.
    Without ``price_path`` the noise-free impacted price is used.
    """
    grid = solution.grid
    N, dt = grid.n_steps, grid.dt
    q0 = np.asarray(q0, dtype=float)
    if q0.shape != (params.d,) or not np.all(np.isfinite(q0)):
        raise ParameterError(f"q0 must be a finite vector of length {params.d}")
    if price_path is None:
        S = impacted_prices(solution, params, S0)
    else:
        S = np.asarray(price_path, dtype=float)
        if S.shape != (N + 1, params.d):
            raise ParameterError(f"price path has shape {S.shape}, expected {(N + 1, params.d)}")

    own = LinearBVP(params.liquidity, np.zeros(params.d), params.Sigma, solution.gamma, solution.A_term, grid)
    z, zdot = own.solve(q0 - solution.E[0])
    q = solution.E + z
    v = solution.Edot + zdot

    trades = np.diff(q, axis=0)
    rate = trades / dt
    cost = dt * (rate**2 * params.eta / params.V).sum(axis=1)
    cash = np.zeros(N + 1)
    cash[1:] = -np.cumsum((trades * S[:-1]).sum(axis=1) + cost)

    qT = q[-1]
    risk = 0.5 * solution.gamma * dt * np.einsum("ki,ij,kj->", q[:-1], params.Sigma, q[:-1])
    reward = cash[-1] + qT @ (S[-1] - solution.A_term * qT) - risk
    return AgentTrajectory(t=grid.nodes, q=q, v=v, trades=trades, cash=cash, prices=S, reward_terminal=float(reward))
