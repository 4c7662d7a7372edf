from .meanfield import (
    HeterogeneousSolution,
    LinearBVP,
    MeanFieldResponse,
    MeanFieldSolution,
    mean_field_response,
    solve_mean_field_heterogeneous,
    solve_mean_field_identical,
)
from .params import (
    AgentClass,
    MarketParams,
    TimeGrid,
    build_sigma,
    covariance_study_example,
    inventory_covariance_example,
    three_asset_example,
)
from .riccati import RiccatiPath, commutator_defect, propagator_G, solve_riccati
from .strategy import AgentTrajectory, mean_field_speed, optimal_speed, simulate_agent, speed_components
