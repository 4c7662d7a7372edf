"""Multi-asset mean-field trading crowd: solvers, simulation and covariance analysis."""

from .core import *  # noqa: F401,F403
from .errors import (  # noqa: F401
    DivergenceError,
    EstimationError,
    MFGError,
    MissingInputError,
    PanelError,
    ParameterError,
    SchemaError,
    SolverError,
    UnitMismatchError,
)
from .market_sim import InventoryLaw, MarketPanel, SimConfig, sample_inventories, simulate_day, simulate_panel  # noqa: F401

__version__ = "0.1.0"
