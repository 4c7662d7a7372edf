"""Synthetic multi-day panels: random crowd inventories, impacted prices.

Each simulated day draws a crowd inventory E0, follows the mean-field
solution for that E0 and moves the mid price by alpha * mu dt plus correlated
Brownian noise.  The mean field is linear in E0, so the response to the unit
vectors is solved once and every day is a matrix product.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core.meanfield import MeanFieldResponse, mean_field_response
from .core.params import MarketParams, TimeGrid, check_positive_definite
from .errors import ParameterError

logger = logging.getLogger(__name__)

DEFAULT_S0 = 100.0
CHUNK_DAYS = 256


def psd_factor(Gamma, name="Gamma", rtol=1e-10) -> np.ndarray:
    """Square-root factor L with L L^T = Gamma for a symmetric PSD matrix."""
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    if Gamma.shape[0] != Gamma.shape[1] or not np.all(np.isfinite(Gamma)):
        raise ParameterError(f"{name} must be a finite square matrix")
    if not np.allclose(Gamma, Gamma.T, rtol=1e-12, atol=0):
        raise ParameterError(f"{name} is not symmetric")
    w, U = np.linalg.eigh(0.5 * (Gamma + Gamma.T))
    scale = max(np.abs(w).max(), 1e-300) if w.size else 1.0
    if w.size and w.min() < -rtol * scale:
        raise ParameterError(f"{name} is not positive semidefinite (smallest eigenvalue {w.min():.6g})")
    return U * np.sqrt(np.clip(w, 0.0, None))[None, :]


@dataclass(frozen=True)
class InventoryLaw:
    """Gaussian law of the crowd's initial inventory (shares)."""

    Gamma: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        object.__setattr__(self, "Gamma", G)
        m = np.zeros(G.shape[0]) if self.mean is None else np.asarray(self.mean, dtype=float)
        if m.shape != (G.shape[0],):
            raise ParameterError("mean must have one entry per asset")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "_factor", psd_factor(G))

    @property
    def d(self):
        return self.Gamma.shape[0]

    @property
    def factor(self):
        return self._factor


def day_generator(seed: int, day: int) -> np.random.Generator:
    """Generator for one day: SeedSequence(seed) with spawn key (day,).

    Days never share a generator, so any split of the days over workers
    gives the same draws.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(day),))))


def _draw_e0(law: InventoryLaw, rng):
    return law.mean + law.factor @ rng.standard_normal(law.d)


def sample_inventories(law: InventoryLaw, seed: int, n_days: int) -> np.ndarray:
    """E0 draws, one row per day, using the same per-day streams as simulate_panel."""
    if n_days < 0:
        raise ParameterError("n_days must be >= 0")
    out = np.empty((n_days, law.d))
    for day in range(n_days):
        out[day] = _draw_e0(law, day_generator(seed, day))
    return out


@dataclass
class MarketPanel:
    """Day x bin x asset table.

    ``prices[l, k]`` is the mid price at ``bin_times[k]`` (k = 0..M);
    ``net_flows[l, k]`` is the signed volume traded in (bin_times[k], bin_times[k+1]].
    """

    prices: np.ndarray  # (N, M+1, d)
    bin_times: np.ndarray  # (M+1,)
    net_flows: np.ndarray | None = None  # (N, M, d)
    assets: list = field(default_factory=list)
    units: dict = field(default_factory=dict)
    E0: np.ndarray | None = None  # simulation truth, not part of the file format

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)
        self.bin_times = np.asarray(self.bin_times, dtype=float)
        if self.prices.ndim != 3:
            raise ParameterError("prices must have shape (days, bins + 1, assets)")
        N, M1, d = self.prices.shape
        if self.bin_times.shape != (M1,):
            raise ParameterError("bin_times must have one entry per price column")
        if M1 < 2 or np.any(np.diff(self.bin_times) <= 0):
            raise ParameterError("bin_times must be strictly increasing with at least one bin")
        if self.net_flows is not None:
            self.net_flows = np.asarray(self.net_flows, dtype=float)
            if self.net_flows.shape != (N, M1 - 1, d):
                raise ParameterError(f"net_flows has shape {self.net_flows.shape}, expected {(N, M1 - 1, d)}")
        if not self.assets:
            self.assets = [f"asset{i}" for i in range(d)]
        if len(self.assets) != d:
            raise ParameterError("one asset name per asset is required")
        if not self.units:
            self.units = {"price": "usd_per_share", "net_volume": "share", "time": "day"}

    @property
    def n_days(self):
        return self.prices.shape[0]

    @property
    def n_bins(self):
        return self.prices.shape[1] - 1

    @property
    def d(self):
        return self.prices.shape[2]

    def increments(self) -> np.ndarray:
        """Price change over each bin, shape (N, M, d)."""
        return np.diff(self.prices, axis=1)

    def bin_length(self, rtol=1e-9) -> float:
        """Common bin length; raises if the bin grid is not uniform."""
        dts = np.diff(self.bin_times)
        if not np.allclose(dts, dts[0], rtol=rtol, atol=0):
            raise ParameterError("bin grid is not uniform")
        return float(dts.mean())

    def select_days(self, days) -> "MarketPanel":
        """Panel made of the given days (repeats allowed, e.g. for a bootstrap)."""
        days = np.asarray(days, dtype=int)
        return MarketPanel(
            prices=self.prices[days],
            bin_times=self.bin_times,
            net_flows=None if self.net_flows is None else self.net_flows[days],
            assets=list(self.assets),
            units=dict(self.units),
            E0=None if self.E0 is None else self.E0[days],
        )

    def subset(self, idx) -> "MarketPanel":
        """Panel restricted to the given asset columns."""
        idx = list(idx)
        return MarketPanel(
            prices=self.prices[:, :, idx],
            bin_times=self.bin_times,
            net_flows=None if self.net_flows is None else self.net_flows[:, :, idx],
            assets=[self.assets[i] for i in idx],
            units=dict(self.units),
            E0=None if self.E0 is None else self.E0[:, idx],
        )

    def equals(self, other: "MarketPanel") -> bool:
        """Bitwise equality of the exported content."""
        same_flows = (self.net_flows is None and other.net_flows is None) or (
            self.net_flows is not None and other.net_flows is not None and np.array_equal(self.net_flows, other.net_flows)
        )
        return (
            same_flows
            and np.array_equal(self.prices, other.prices)
            and np.array_equal(self.bin_times, other.bin_times)
            and list(self.assets) == list(other.assets)
        )


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines a simulated panel.

    ``steps_per_bin`` solver steps make up one bin.  ``extra_price_cov`` is an
    optional additional Brownian price noise (covariance per day) and
    ``flow_noise_std`` an optional per-bin additive noise on the recorded
    flows, mimicking volume from outside the modelled crowd.  Both are off by
    default.
    """

    params: MarketParams
    law: InventoryLaw
    n_days: int
    n_bins: int
    seed: int = 0
    steps_per_bin: int = 1
    S0: float = DEFAULT_S0
    extra_price_cov: np.ndarray | None = None
    flow_noise_std: np.ndarray | None = None

    def __post_init__(self):
        if self.n_days < 1 or self.n_bins < 1 or self.steps_per_bin < 1:
            raise ParameterError("n_days, n_bins and steps_per_bin must be positive")
        if self.law.d != self.params.d:
            raise ParameterError("inventory law and market have different dimensions")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.n_bins * self.steps_per_bin, self.params.T)

    @property
    def bin_times(self) -> np.ndarray:
        return self.grid.nodes[:: self.steps_per_bin]


class _DayKernel:
    """Precomputed pieces shared by all days of one configuration."""

    def __init__(self, config: SimConfig, response: MeanFieldResponse | None = None):
        p = config.params
        self.config = config
        self.grid = config.grid
        self.response = response or mean_field_response(p, self.grid)
        self.noise_factor = np.linalg.cholesky(p.Sigma * self.grid.dt)
        extra = config.extra_price_cov
        if extra is not None:
            extra = np.asarray(extra, dtype=float)
            if not np.any(extra):
                extra = None
        self.extra_factor = None if extra is None else psd_factor(extra * self.grid.dt, "extra_price_cov")
        std = config.flow_noise_std
        self.flow_std = None if std is None or not np.any(std) else np.broadcast_to(np.asarray(std, dtype=float), (p.d,))

    def run(self, day: int):
        cfg = self.config
        p = cfg.params
        N, spb, d = self.grid.n_steps, cfg.steps_per_bin, p.d
        rng = day_generator(cfg.seed, day)
        E0 = _draw_e0(cfg.law, rng)
        x = self.response.x @ E0  # (N+1, d)
        y = self.response.y @ E0
        noise = rng.standard_normal((N, d)) @ self.noise_factor.T
        if self.extra_factor is not None:
            noise = noise + rng.standard_normal((N, d)) @ self.extra_factor.T
        # Euler step S_{k+1} = S_k + alpha mu_k dt + dW_k with mu_k = E'_k
        dS = p.alpha * y[:-1] * self.grid.dt + noise
        S = np.empty((N + 1, d))
        S[0] = cfg.S0
        S[1:] = cfg.S0 + np.cumsum(dS, axis=0)
        marks = x[::spb]
        flows = np.diff(marks, axis=0)
        if self.flow_std is not None:
            flows = flows + rng.standard_normal(flows.shape) * self.flow_std
        return S[::spb], flows, E0


def simulate_day(params: MarketParams, E0, grid: TimeGrid, seed: int, steps_per_bin=1, S0=DEFAULT_S0) -> MarketPanel:
    """One day for a given crowd inventory E0 (no draw from a law)."""
    E0 = np.asarray(E0, dtype=float)
    if E0.shape != (params.d,):
        raise ParameterError(f"E0 must have shape ({params.d},)")
    if grid.n_steps % steps_per_bin:
        raise ParameterError("the bin grid must be a sub-grid of the solver grid")
    law = InventoryLaw(Gamma=np.zeros((params.d, params.d)), mean=E0)
    cfg = SimConfig(params=params, law=law, n_days=1, n_bins=grid.n_steps // steps_per_bin, seed=seed,
                    steps_per_bin=steps_per_bin, S0=S0)
    return simulate_panel(cfg)


def simulate_panel(config: SimConfig, threads: int = 1, response: MeanFieldResponse | None = None) -> MarketPanel:
    """Simulate ``config.n_days`` independent days.

    Output depends on the configuration only; ``threads`` changes the
    scheduling, never the numbers.
    """
    kernel = _DayKernel(config, response)
    N, M, d = config.n_days, config.n_bins, config.params.d
    prices = np.empty((N, M + 1, d))
    flows = np.empty((N, M, d))
    E0 = np.empty((N, d))

    def work(start):
        for day in range(start, min(start + CHUNK_DAYS, N)):
            prices[day], flows[day], E0[day] = kernel.run(day)

    starts = range(0, N, CHUNK_DAYS)
    if threads <= 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    logger.debug("simulated %d days x %d bins x %d assets", N, M, d)
    return MarketPanel(prices=prices, bin_times=config.bin_times, net_flows=flows, E0=E0)


def inventory_law_from_scale(base, scale) -> InventoryLaw:
    """Gamma = scale^2 * base, as used for the covariance study."""
    base = np.asarray(base, dtype=float)
    check_positive_definite(base, "inventory correlation")
    return InventoryLaw(Gamma=scale**2 * base)
