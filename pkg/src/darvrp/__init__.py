"""CVRP construction policy with distance-aware attention reshaping."""

from .instance import (ContractViolation, DegenerateGeometry, Instance, NormalizedView,
                       Solution, check_feasible, distance_row, euclidean_distance,
                       normalize_to_unit_square, solution_cost)

__all__ = [
    "ContractViolation", "DegenerateGeometry", "Instance", "NormalizedView", "Solution",
    "check_feasible", "distance_row", "euclidean_distance", "normalize_to_unit_square",
    "solution_cost",
]
__version__ = "0.1.0"
