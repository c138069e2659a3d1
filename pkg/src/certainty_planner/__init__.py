"""Path planning under delayed target identification on 2D grids."""

from .eikonal import ValueSolution, reachable_set, solve_stationary, trace_trajectory
from .grid import DomainMask, GridSpec, Point, ScalarField
from .robust import (
    InfeasibleError,
    TargetEnsemble,
    chance_constrained_policy,
    dr_field,
    expected_field,
    pareto_front,
    risk_sensitive_field,
    worst_field,
)
from .scenarios import ScenarioDef, load_scenario, paper_main_scenario

__all__ = [
    "DomainMask", "GridSpec", "InfeasibleError", "Point", "ScalarField", "ScenarioDef",
    "TargetEnsemble", "ValueSolution", "chance_constrained_policy", "dr_field",
    "expected_field", "load_scenario", "paper_main_scenario", "pareto_front",
    "reachable_set", "risk_sensitive_field", "solve_stationary", "trace_trajectory",
    "worst_field",
]
