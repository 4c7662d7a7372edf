"""Market parameters, time grids and agent classes."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError


def build_sigma(sigma, corr) -> np.ndarray:
    """Assemble the fundamental covariance ``sigma_i sigma_j corr_ij``.

    Raises ParameterError when ``corr`` is not a symmetric, unit-diagonal,
    positive definite matrix; the message names the first leading principal
    minor that is not positive.
    """
    sigma = np.asarray(sigma, dtype=float)
    corr = np.asarray(corr, dtype=float)
    d = sigma.shape[0]
    if sigma.ndim != 1 or corr.shape != (d, d):
        raise ParameterError(f"sigma has shape {sigma.shape}, corr has shape {corr.shape}")
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ParameterError("volatilities must be finite and > 0")
    if not np.allclose(corr, corr.T, rtol=0, atol=1e-12):
        raise ParameterError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, rtol=0, atol=1e-12):
        raise ParameterError("correlation matrix must have a unit diagonal")
    check_positive_definite(corr, "correlation matrix")
    return np.outer(sigma, sigma) * corr


def check_positive_definite(mat, name="matrix"):
    try:
        np.linalg.cholesky(mat)
        return
    except np.linalg.LinAlgError:
        pass
    for k in range(1, mat.shape[0] + 1):
        sign, logdet = np.linalg.slogdet(mat[:k, :k])
        if sign <= 0:
            minor = mat[:k, :k]
            raise ParameterError(
                f"{name} is not positive definite: leading principal minor of order {k} "
                f"has determinant {sign * np.exp(logdet):.6g} "
                f"(smallest eigenvalue of that block {np.linalg.eigvalsh(minor).min():.6g})"
            )
    raise ParameterError(f"{name} is not numerically positive definite")


@dataclass(frozen=True)
class MarketParams:
    """Per-asset microstructure and risk parameters.

    Units: sigma in $/(sqrt(day) share), V in share/day, eta and alpha in
    $/share, A_term in $/(day share), gamma in 1/$, T in days.
    """

    sigma: np.ndarray
    corr: np.ndarray
    V: np.ndarray
    eta: np.ndarray
    alpha: np.ndarray
    A_term: np.ndarray
    gamma: float
    T: float = 1.0
    Sigma: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        for name in ("sigma", "V", "eta", "alpha", "A_term"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            arr.setflags(write=False)
            set_(self, name, arr)
        corr = np.atleast_2d(np.asarray(self.corr, dtype=float)).copy()
        corr.setflags(write=False)
        set_(self, "corr", corr)
        set_(self, "gamma", float(self.gamma))
        set_(self, "T", float(self.T))
        d = self.sigma.shape[0]
        for name in ("V", "eta", "alpha", "A_term"):
            if getattr(self, name).shape != (d,):
                raise ParameterError(f"{name} must have length {d}")
        if np.any(self.V <= 0) or np.any(self.eta <= 0):
            raise ParameterError("V and eta must be > 0")
        if np.any(self.A_term <= 0):
            raise ParameterError("terminal penalties A_term must be > 0")
        if np.any(self.alpha < 0):
            raise ParameterError("permanent impact alpha must be >= 0")
        if not self.gamma >= 0:
            raise ParameterError("risk aversion gamma must be >= 0")
        if not self.T > 0:
            raise ParameterError("horizon T must be > 0")
        Sigma = build_sigma(self.sigma, self.corr)
        Sigma.setflags(write=False)
        set_(self, "Sigma", Sigma)

    @classmethod
    def from_covariance(cls, Sigma, **kwargs) -> "MarketParams":
        Sigma = np.asarray(Sigma, dtype=float)
        sigma = np.sqrt(np.diag(Sigma))
        corr = Sigma / np.outer(sigma, sigma)
        np.fill_diagonal(corr, 1.0)
        corr = 0.5 * (corr + corr.T)
        return cls(sigma=sigma, corr=corr, **kwargs)

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def liquidity(self) -> np.ndarray:
        """Diagonal of the liquidity matrix, V_i / (4 eta_i)."""
        return self.V / (4.0 * self.eta)

    def replace(self, **changes) -> "MarketParams":
        return dataclasses.replace(self, **changes)

    def subset(self, idx) -> "MarketParams":
        idx = np.asarray(idx)
        return MarketParams(
            sigma=self.sigma[idx],
            corr=self.corr[np.ix_(idx, idx)],
            V=self.V[idx],
            eta=self.eta[idx],
            alpha=self.alpha[idx],
            A_term=self.A_term[idx],
            gamma=self.gamma,
            T=self.T,
        )


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_0 = 0 < ... < t_N = T."""

    n_steps: int
    T: float = 1.0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ParameterError("n_steps must be a positive integer")
        if not self.T > 0:
            raise ParameterError("T must be > 0")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def __len__(self):
        return self.n_steps + 1


@dataclass(frozen=True)
class AgentClass:
    """A homogeneous group of investors inside a heterogeneous market."""

    weight: float
    gamma: float
    A_term: np.ndarray
    E0: np.ndarray

    def __post_init__(self):
        A = np.atleast_1d(np.asarray(self.A_term, dtype=float))
        E0 = np.atleast_1d(np.asarray(self.E0, dtype=float))
        object.__setattr__(self, "A_term", A)
        object.__setattr__(self, "E0", E0)
        if not 0 < self.weight <= 1:
            raise ParameterError("class weight must lie in (0, 1]")
        if self.gamma < 0:
            raise ParameterError("class risk aversion must be >= 0")
        if np.any(A <= 0):
            raise ParameterError("class terminal penalties must be > 0")


def three_asset_example(gamma=5e-5, rho12=0.8, rho13=0.0, rho23=0.0, A3=2.5) -> MarketParams:
    """Three-asset portfolio used for the stylized-fact experiments."""
    corr = np.array([[1.0, rho12, rho13], [rho12, 1.0, rho23], [rho13, rho23, 1.0]])
    return MarketParams(
        sigma=[0.3, 1.0, 0.3],
        corr=corr,
        V=[2e6, 5e6, 5e6],
        eta=[0.1, 0.1, 0.4],
        alpha=[8e-4, 8e-4, 6e-4],
        A_term=[2.5, 2.5, A3],
        gamma=gamma,
        T=1.0,
    )


def covariance_study_example(gamma=5e-5) -> MarketParams:
    """The three-asset market with the correlations used for the covariance study."""
    return three_asset_example(gamma=gamma, rho12=0.6, rho13=0.3, rho23=0.05)


def inventory_covariance_example(scale=1e4) -> np.ndarray:
    base = np.array([[1.0, 0.2, -0.1], [0.2, 1.0, 0.3], [-0.1, 0.3, 1.0]])
    return scale**2 * base
