import numpy as np
import pytest

from mfgtrade import MarketParams, TimeGrid
from mfgtrade.core.params import covariance_study_example, inventory_covariance_example
from mfgtrade.market_sim import InventoryLaw, SimConfig, simulate_panel


def scalar_params(A=2.5, V=2e6, eta=0.1, gamma=0.0, alpha=0.0, sigma=1.0, T=1.0):
    return MarketParams(sigma=[sigma], corr=[[1.0]], V=[V], eta=[eta], alpha=[alpha], A_term=[A], gamma=gamma, T=T)


def moderate_params(d=2, gamma=0.5, alpha=None, seed=0):
    """Small, well-conditioned market where generic ODE oracles are cheap."""
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0.5, 1.5, d)
    L = rng.normal(size=(d, d))
    S = L @ L.T + d * np.eye(d)
    corr = S / np.sqrt(np.outer(np.diag(S), np.diag(S)))
    return MarketParams(
        sigma=sigma, corr=corr, V=rng.uniform(2.0, 6.0, d), eta=rng.uniform(0.5, 1.5, d),
        alpha=rng.uniform(0.1, 0.5, d) if alpha is None else alpha,
        A_term=rng.uniform(0.5, 2.0, d), gamma=gamma,
    )


@pytest.fixture(scope="session")
def study_config():
    """The covariance study: three assets, lambda = 1e4 shares, 100 bins of 0.01 day, 1e4 days."""
    params = covariance_study_example(gamma=5e-5)
    law = InventoryLaw(Gamma=inventory_covariance_example(1e4))
    return SimConfig(params=params, law=law, n_days=10_000, n_bins=100, seed=42)


@pytest.fixture(scope="session")
def study_panel(study_config):
    return simulate_panel(study_config)


@pytest.fixture
def grid100():
    return TimeGrid(100, 1.0)
