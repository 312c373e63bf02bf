"""Circuit-based steady-state grid situational awareness toolkit.

Robust power-flow simulation with sparse infeasibility localization, convex
state estimation with error quantification, dynamic-graph time-series
anomaly detection, and a synergy loop feeding detector priors back into the
estimator.
"""

__version__ = "0.1.0"

from .errors import (
    CaseValidationError,
    GridSenseError,
    IslandedCaseError,
    PowerFlowDivergence,
    SingularSystemError,
    SolverFailure,
    UnobservableInputError,
)
from .network import (
    Branch,
    Bus,
    GraphSnapshot,
    GridCase,
    NodeBreakerCase,
    Switch,
    admittance_matrix,
    case_to_json,
    extend_to_node_breaker,
    node_breaker_to_json,
    parse_any_case,
    parse_case,
    parse_node_breaker,
)

__all__ = [
    "Branch",
    "Bus",
    "CaseValidationError",
    "GraphSnapshot",
    "GridCase",
    "GridSenseError",
    "IslandedCaseError",
    "NodeBreakerCase",
    "PowerFlowDivergence",
    "SingularSystemError",
    "SolverFailure",
    "Switch",
    "UnobservableInputError",
    "admittance_matrix",
    "case_to_json",
    "extend_to_node_breaker",
    "node_breaker_to_json",
    "parse_any_case",
    "parse_case",
    "parse_node_breaker",
    "__version__",
]
