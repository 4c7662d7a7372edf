"""Forward-backward system for the mean inventory of the crowd.

Identical preferences:

    E'' = -2 Vq Al E' + 2 gamma Vq Sigma E,   E(0) = E0,   E'(T) + 4 Vq A E(T) = 0,

discretised with the implicit scheme (x_k ~ E, y_k ~ E')

    x_0 = E0
    x_k - x_{k-1} - dt y_{k-1} = 0
    y_k - y_{k-1} - dt (2 gamma Vq Sigma x_k - 2 Vq Al y_k) = 0
    4 Vq A x_N + y_N = 0

and solved as one sparse banded system.  Heterogeneous classes share the
market flow mu = sum_a w_a E_a'; each class sees mu as an exogenous forcing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm
from scipy.sparse.linalg import splu

from ..errors import DivergenceError, ParameterError, SolverError
from .params import AgentClass, MarketParams, TimeGrid
from .riccati import RiccatiPath, solve_riccati

logger = logging.getLogger(__name__)


class LinearBVP:
    """Factorised discrete boundary value problem.

    With ``implicit_flow=True`` the flow entering the friction term is the
    unknown speed itself (identical preferences).  Otherwise the flow is an
    exogenous right-hand side passed to :meth:`solve`.
    """

    def __init__(self, liquidity, alpha, Sigma, gamma, A_term, grid: TimeGrid, implicit_flow=True):
        self.grid = grid
        self.liquidity = np.asarray(liquidity, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.A_term = np.asarray(A_term, dtype=float)
        self.gamma = float(gamma)
        self.implicit_flow = implicit_flow
        d = self.d = self.liquidity.shape[0]
        N = grid.n_steps
        dt = grid.dt
        friction = 2.0 * self.liquidity * self.alpha
        Kx = 2.0 * self.gamma * self.liquidity[:, None] * np.asarray(Sigma)

        rows, cols, vals = [], [], []

        def put(r, c, v):
            rows.append(np.broadcast_to(r, np.shape(v)).ravel())
            cols.append(np.broadcast_to(c, np.shape(v)).ravel())
            vals.append(np.asarray(v, dtype=float).ravel())

        ii = np.arange(d)
        xi = lambda k: 2 * d * k + ii  # noqa: E731
        yi = lambda k: 2 * d * k + d + ii  # noqa: E731
        put(ii, xi(0), np.ones(d))
        k = np.arange(1, N + 1)[:, None]
        # x rows: block k starts at d + 2d(k-1)
        rx = d + 2 * d * (k - 1) + ii
        put(rx, 2 * d * k + ii, np.ones((N, d)))
        put(rx, 2 * d * (k - 1) + ii, -np.ones((N, d)))
        put(rx, 2 * d * (k - 1) + d + ii, -dt * np.ones((N, d)))
        ry = rx + d
        diag_y = 1.0 + dt * friction if implicit_flow else np.ones(d)
        put(ry, 2 * d * k + d + ii, np.broadcast_to(diag_y, (N, d)))
        put(ry, 2 * d * (k - 1) + d + ii, -np.ones((N, d)))
        put(ry[:, :, None], (2 * d * k)[:, :, None] + ii[None, None, :], np.broadcast_to(-dt * Kx, (N, d, d)))
        rt = d + 2 * d * N + ii
        put(rt, xi(N), 4.0 * self.liquidity * self.A_term)
        put(rt, yi(N), np.ones(d))

        size = 2 * d * (N + 1)
        mat = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        )
        try:
            self._lu = splu(mat)
        except RuntimeError as exc:
            raise SolverError(f"boundary value system is singular: {exc}") from exc
        self.matrix = mat

    def solve(self, E0, flow=None, forcing=None, terminal=None):
        """Return (x, y), each of shape (N+1, d) or (N+1, d, m) for m stacked E0 columns.

        ``flow``: exogenous market flow at the nodes (N+1, d), required when the
        system was built with ``implicit_flow=False``.
        ``forcing``: extra term f_k added as dt * f_k to the speed equations.
        ``terminal``: right-hand side of the terminal condition.
        """
        d, N, dt = self.d, self.grid.n_steps, self.grid.dt
        E0 = np.asarray(E0, dtype=float)
        multi = E0.ndim == 2
        m = E0.shape[1] if multi else 1
        rhs = np.zeros((N + 1, 2 * d, m))
        rhs[0, :d] = E0.reshape(d, m)
        speed_rhs = np.zeros((N, d, m))
        if not self.implicit_flow:
            if flow is None:
                raise ParameterError("an exogenous flow is required for this system")
            flow = np.asarray(flow, dtype=float).reshape(N + 1, d, -1)
            speed_rhs -= dt * 2.0 * (self.liquidity * self.alpha)[None, :, None] * flow[1:]
        if forcing is not None:
            speed_rhs += dt * np.asarray(forcing, dtype=float).reshape(N + 1, d, -1)[1:]
        # rows: [x_0 | (x_k, y_k) for k=1..N | terminal]
        flat = np.zeros((2 * d * (N + 1), m))
        flat[:d] = E0.reshape(d, m)
        body = flat[d : d + 2 * d * N].reshape(N, 2 * d, m)
        body[:, d:] = speed_rhs
        if terminal is not None:
            flat[d + 2 * d * N :] = np.asarray(terminal, dtype=float).reshape(d, -1)
        sol = self._lu.solve(flat)
        if not np.all(np.isfinite(sol)):
            raise SolverError("boundary value solve produced non-finite values")
        sol = sol.reshape(N + 1, 2, d, m)
        x, y = sol[:, 0], sol[:, 1]
        if not multi:
            x, y = x[..., 0], y[..., 0]
        return x, y


@dataclass
class MeanFieldSolution:
    grid: TimeGrid
    E: np.ndarray  # (N+1, d)
    Edot: np.ndarray
    mu: np.ndarray
    Hs: np.ndarray  # linear coefficient of the value function
    h: np.ndarray
    riccati: RiccatiPath
    A_term: np.ndarray
    gamma: float

    @property
    def liquidity(self):
        return self.riccati.liquidity

    def boundary_residual(self) -> float:
        r = self.Edot[-1] + 4.0 * self.liquidity * self.A_term * self.E[-1]
        return float(np.linalg.norm(r))


def _linear_coefficient(riccati: RiccatiPath, alpha, mu, grid: TimeGrid):
    """Backward solve of Hs' = -Al mu - 2 H Vq Hs, Hs(T) = 0.

    Exponential integrator with the flow held at its scheme value mu_k on
    [t_k, t_{k+1}); H Vq frozen at the step midpoint for the source integral.
    """
    d, N, dt = riccati.d, grid.n_steps, grid.dt
    Hs = np.zeros((N + 1, d))
    if not np.any(alpha) or not np.any(mu):
        return Hs
    factors = riccati.step_factors()
    # phi1(K dt) dt = int_0^dt exp(s K) ds, read off an augmented exponential
    K = 2.0 * riccati.offset_values(0.5) * riccati.liquidity[None, None, :]
    aug = np.zeros((N, 2 * d, 2 * d))
    aug[:, :d, :d] = K * dt
    aug[:, :d, d:] = np.eye(d) * dt
    phi1 = expm(aug)[:, :d, d:]
    source = np.einsum("kij,kj->ki", phi1, alpha * mu[:-1])
    for k in range(N - 1, -1, -1):
        Hs[k] = factors[k] @ Hs[k + 1] + source[k]
    return Hs


def _value_constant(Hs, liquidity, grid: TimeGrid):
    # h(t) = int_t^T Hs . Vq Hs dw, trapezoid rule
    q = np.einsum("ki,i,ki->k", Hs, liquidity, Hs)
    h = np.zeros_like(q)
    h[:-1] = np.cumsum((0.5 * grid.dt * (q[1:] + q[:-1]))[::-1])[::-1]
    return h


def _finish(params, grid, riccati, E, Edot, mu, A_term, gamma):
    Hs = _linear_coefficient(riccati, params.alpha, mu, grid)
    h = _value_constant(Hs, params.liquidity, grid)
    return MeanFieldSolution(grid=grid, E=E, Edot=Edot, mu=mu, Hs=Hs, h=h, riccati=riccati, A_term=A_term, gamma=gamma)


def solve_mean_field_identical(params: MarketParams, E0, grid: TimeGrid, riccati: RiccatiPath | None = None) -> MeanFieldSolution:
    E0 = np.asarray(E0, dtype=float)
    if E0.shape != (params.d,):
        raise ParameterError(f"E0 must have shape ({params.d},)")
    if riccati is None:
        riccati = solve_riccati(params, grid)
    bvp = LinearBVP(params.liquidity, params.alpha, params.Sigma, params.gamma, params.A_term, grid, implicit_flow=True)
    x, y = bvp.solve(E0)
    return _finish(params, grid, riccati, x, y, y.copy(), params.A_term, params.gamma)


@dataclass
class MeanFieldResponse:
    """Linear map E0 -> (E, E') of the identical-preference scheme.

    ``x[k, i, l]`` is E^i(t_k) for E0 = e_l.
    """

    grid: TimeGrid
    x: np.ndarray
    y: np.ndarray

    def inventory(self, E0):
        return np.einsum("kil,...l->...ki", self.x, np.asarray(E0, dtype=float))

    def speed(self, E0):
        return np.einsum("kil,...l->...ki", self.y, np.asarray(E0, dtype=float))


def mean_field_response(params: MarketParams, grid: TimeGrid) -> MeanFieldResponse:
    bvp = LinearBVP(params.liquidity, params.alpha, params.Sigma, params.gamma, params.A_term, grid, implicit_flow=True)
    x, y = bvp.solve(np.eye(params.d))
    return MeanFieldResponse(grid=grid, x=x, y=y)


@dataclass
class HeterogeneousSolution:
    classes: list
    weights: np.ndarray
    mu: np.ndarray
    residuals: list = field(default_factory=list)
    iterations: int = 0
    damping: float = 1.0


def _check_classes(params, classes):
    if not classes:
        raise ParameterError("at least one agent class is required")
    w = np.array([c.weight for c in classes], dtype=float)
    if abs(w.sum() - 1.0) > 1e-12:
        raise ParameterError(f"class weights sum to {w.sum()!r}, expected 1")
    for c in classes:
        if c.A_term.shape != (params.d,) or c.E0.shape != (params.d,):
            raise ParameterError("class A_term and E0 must have one entry per asset")
    return w


def solve_mean_field_heterogeneous(
    params: MarketParams,
    classes: list[AgentClass],
    grid: TimeGrid,
    damping: float = 1.0,
    max_iter: int = 200,
    tol: float = 1e-12,
    method: str = "aggregate",
) -> HeterogeneousSolution:
    """Fixed point of mu -> sum_a w_a E_a'(mu) by damped Picard iteration.

    ``method="plain"`` applies that map directly; it contracts only when
    2 Vq alpha T is small.  ``method="aggregate"`` (default) replaces the
    plain update by the flow of the aggregated market, solved with its own
    friction term implicit and the class spread (gamma_a - mean gamma,
    A_a - mean A) evaluated at the current class solutions.  Both maps have
    the same fixed point; the second one stays contractive at realistic
    impact levels.

    Convergence: sup-norm update below ``tol`` relative to the flow scale.
    The damping is halved whenever the residual grows; three consecutive
    increases raise DivergenceError.
    """
    if method not in ("aggregate", "plain"):
        raise ParameterError(f"unknown method {method!r}")
    if not 0 < damping <= 1:
        raise ParameterError("damping must lie in (0, 1]")
    w = _check_classes(params, classes)
    d, N, dt = params.d, grid.n_steps, grid.dt
    Vq, Sigma = params.liquidity, params.Sigma

    solvers = [LinearBVP(Vq, params.alpha, Sigma, c.gamma, c.A_term, grid, implicit_flow=False) for c in classes]
    gamma_bar = float(np.dot(w, [c.gamma for c in classes]))
    A_bar = np.einsum("a,ai->i", w, np.array([c.A_term for c in classes]))
    E0_bar = np.einsum("a,ai->i", w, np.array([c.E0 for c in classes]))
    aggregate = None
    if method == "aggregate":
        aggregate = LinearBVP(Vq, params.alpha, Sigma, gamma_bar, A_bar, grid, implicit_flow=True)

    scale = max(1.0, float(np.abs([c.E0 for c in classes]).max()))
    mu = np.zeros((N + 1, d))
    residuals, increases = [], 0
    omega = damping
    for it in range(1, max_iter + 1):
        sols = [s.solve(c.E0, flow=mu) for s, c in zip(solvers, classes)]
        flow = sum(wa * y for wa, (_, y) in zip(w, sols))
        if method == "plain":
            target = flow
        else:
            spread = sum(wa * (c.gamma - gamma_bar) * x for wa, c, (x, _) in zip(w, classes, sols))
            forcing = 2.0 * (Vq[:, None] * Sigma @ spread.T).T
            terminal = -sum(wa * 4.0 * Vq * (c.A_term - A_bar) * x[-1] for wa, c, (x, _) in zip(w, classes, sols))
            _, target = aggregate.solve(E0_bar, forcing=forcing, terminal=terminal)
        resid = float(np.abs(flow - mu).max())
        residuals.append(resid)
        update = target - mu
        step = float(np.abs(update).max())
        logger.debug("iteration %d: residual %.3e, damping %.3g", it, resid, omega)
        if len(residuals) > 1 and resid > residuals[-2]:
            increases += 1
            omega *= 0.5
            if increases >= 3:
                raise DivergenceError(
                    f"fixed-point iteration is not contracting (|alpha|={params.alpha.max():.3g}, "
                    f"residuals {residuals[-4:]})",
                    history=residuals,
                    coupling=float(params.alpha.max()),
                )
        else:
            increases = 0
        mu_scale = max(scale / grid.T, float(np.abs(target).max()))
        if max(step, resid) <= tol * mu_scale:
            break
        mu = mu + omega * update
    else:
        raise DivergenceError(f"no convergence after {max_iter} iterations", history=residuals, coupling=float(params.alpha.max()))

    out = []
    for c, (x, y) in zip(classes, sols):
        riccati = solve_riccati(params, grid, gamma=c.gamma, A_term=c.A_term)
        out.append(_finish(params, grid, riccati, x, y, mu.copy(), c.A_term, c.gamma))
    return HeterogeneousSolution(classes=out, weights=w, mu=mu, residuals=residuals, iterations=it, damping=omega)
