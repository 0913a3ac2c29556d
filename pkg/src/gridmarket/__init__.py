"""Coupled power-grid, electricity-market and bidder dynamics on linearized networks."""

__version__ = "0.1.0"

from .dynamics import (
    ClosedLoop,
    Mechanism,
    SystemState,
    TimeConstants,
    Trajectory,
    Variant,
    clearing_prices,
    equilibrium_state,
    project_plus,
    simulate,
    steady_state_detect,
    step,
    to_planner_point,
    vector_field,
)
from .network import (
    BusSpec,
    ConvexCost,
    DerivedMatrices,
    LineSpec,
    NetworkModel,
    QuadraticCost,
    derive_matrices,
    flows_from_injection,
    load_network,
)
from .planner import PlannerPoint, PlannerSolution, kkt_residual, lagrangian_value, solve_edp, solve_planner
from .scenario import Scenario, load_scenario
from .stability import build_w_sigma, eigenvalues, linearize, lyapunov_value, rho_bound, stability_verdict
