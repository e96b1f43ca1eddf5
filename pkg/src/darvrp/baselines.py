"""Classic comparators: nearest-feasible-neighbour greedy and an exact oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .instance import ContractViolation, Instance, Solution, distance_row, solution_cost

ORACLE_LIMIT = 9


class OracleRefused(ContractViolation):
    pass


def greedy_nearest(inst: Instance) -> Solution:
    """Visit the nearest unvisited customer that still fits; go home when none does.

    Ties go to the lower customer index (argmin returns the first minimum).
    """
    demands = inst.demands
    unvisited = np.ones(inst.n + 1, dtype=bool)
    unvisited[0] = False
    routes, route = [], []
    current, remaining = 0, float(inst.capacity)
    for _ in range(inst.n):
        d = distance_row(inst, current)
        ok = unvisited & (demands <= remaining)
        if not ok.any():
            routes.append(route)
            route, current, remaining = [], 0, float(inst.capacity)
            d = distance_row(inst, 0)
            ok = unvisited & (demands <= remaining)
        nxt = int(np.argmin(np.where(ok, d, np.inf)))
        route.append(nxt)
        unvisited[nxt] = False
        remaining -= demands[nxt]
        current = nxt
    routes.append(route)
    return Solution(routes, solution_cost(inst, routes))


@dataclass
class OracleResult:
    optimal_cost: float
    optimal_solution: Solution
    nodes_explored: int


def exact_optimum(inst: Instance, limit: int = ORACLE_LIMIT) -> OracleResult:
    """Optimal CVRP solution by enumerating customer orders and splitting each optimally.

    Every feasible solution is some giant tour (routes concatenated) cut
    into capacity-feasible segments, so the minimum over all orders of the
    best split is the optimum. The split is a shortest path over cut
    points, evaluated for all permutations at once.
    """
    n = inst.n
    if n > limit:
        raise OracleRefused(f"exact_optimum refuses n={n}: cap is {limit} customers")
    dist = inst.distance_matrix(cap=n + 1)
    perms = np.array(list(itertools.permutations(range(1, n + 1))), dtype=np.int64)
    count = perms.shape[0]
    dem = inst.demands[perms]                         # (P, n)
    cum_dem = np.concatenate([np.zeros((count, 1)), np.cumsum(dem, axis=1)], axis=1)
    legs = dist[perms[:, :-1], perms[:, 1:]]          # (P, n-1)
    cum_leg = np.concatenate([np.zeros((count, 1)), np.cumsum(legs, axis=1)], axis=1)
    from_depot = dist[0, perms]                       # (P, n)

    best = np.full((count, n + 1), np.inf)
    best[:, 0] = 0.0
    cut = np.zeros((count, n + 1), dtype=np.int64)
    for j in range(1, n + 1):
        for i in range(j):
            # segment perms[i:j] served by one route
            load = cum_dem[:, j] - cum_dem[:, i]
            seg = from_depot[:, i] + (cum_leg[:, j - 1] - cum_leg[:, i]) + from_depot[:, j - 1]
            cand = np.where(load <= inst.capacity, best[:, i] + seg, np.inf)
            better = cand < best[:, j]
            best[:, j] = np.where(better, cand, best[:, j])
            cut[:, j] = np.where(better, i, cut[:, j])
    p = int(np.argmin(best[:, n]))
    routes = []
    j = n
    while j > 0:
        i = int(cut[p, j])
        routes.append([int(c) for c in perms[p, i:j]])
        j = i
    routes.reverse()
    cost = solution_cost(inst, routes)
    return OracleResult(cost, Solution(routes, cost), count)


def gap(cost: float, reference: float) -> float:
    """Percentage gap of ``cost`` over ``reference``, rounded to two decimals."""
    if not reference > 0:
        raise ContractViolation(f"gap reference must be positive, got {reference}")
    return round((cost - reference) / reference * 100.0, 2)
