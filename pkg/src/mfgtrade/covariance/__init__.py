from .estimators import (
    ConditionedPattern,
    CovarianceSeries,
    Imbalances,
    conditioned_covariance,
    correlation_from_covariance,
    covariance_standard_errors,
    estimate_covariance,
    flow_covariance,
    median_patterns,
    trade_imbalances,
)
from .regression import RegressionFit, bootstrap_alpha_sq, fit_impact_regression
from .theory import (
    ExcessPrediction,
    PiThetaDecomposition,
    bin_edges,
    decompose_pi_theta,
    predicted_flow_covariance,
    theoretical_excess,
)
