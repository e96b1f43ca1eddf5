"""CVRP domain types: instances, solutions, Euclidean geometry and feasibility."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Above this many nodes a full distance matrix is not materialized.
DISTANCE_MATRIX_CAP = 2000


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class DegenerateGeometry(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    """A CVRP instance. Node 0 is the depot, customers are nodes 1..n.

    ``customers`` holds ``(x, y, demand)`` triples in file order.
    """

    name: str
    depot: tuple[float, float]
    customers: tuple[tuple[float, float, float], ...]
    capacity: float
    bks: Optional[float] = None
    _coords: np.ndarray = field(init=False, repr=False, compare=False)
    _demands: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        customers = tuple(tuple(float(v) for v in c) for c in self.customers)
        object.__setattr__(self, "customers", customers)
        object.__setattr__(self, "depot", (float(self.depot[0]), float(self.depot[1])))
        if len(customers) < 1:
            raise ContractViolation("instance needs at least one customer")
        if not self.capacity > 0:
            raise ContractViolation(f"capacity must be positive, got {self.capacity}")
        for i, (_, _, c) in enumerate(customers, start=1):
            if not 0 < c <= self.capacity:
                raise ContractViolation(
                    f"customer {i} demand {c} outside (0, {self.capacity}]")
        coords = np.array([self.depot] + [(x, y) for x, y, _ in customers], dtype=np.float64)
        demands = np.array([0.0] + [c for _, _, c in customers], dtype=np.float64)
        coords.setflags(write=False)
        demands.setflags(write=False)
        object.__setattr__(self, "_coords", coords)
        object.__setattr__(self, "_demands", demands)

    @classmethod
    def from_arrays(cls, coords, demands, capacity, name="", bks=None) -> "Instance":
        """Build from node arrays where row 0 is the depot (its demand is ignored)."""
        coords = np.asarray(coords, dtype=np.float64)
        demands = np.asarray(demands, dtype=np.float64)
        customers = tuple(
            (float(coords[i, 0]), float(coords[i, 1]), float(demands[i]))
            for i in range(1, len(coords)))
        return cls(name, (float(coords[0, 0]), float(coords[0, 1])), customers, capacity, bks)

    @property
    def n(self) -> int:
        return len(self.customers)

    @property
    def coords(self) -> np.ndarray:
        """(n+1, 2) read-only array of node coordinates, depot first."""
        return self._coords

    @property
    def demands(self) -> np.ndarray:
        """(n+1,) read-only array of demands, depot demand 0."""
        return self._demands

    def distance_matrix(self, cap: int = DISTANCE_MATRIX_CAP) -> Optional[np.ndarray]:
        if self.n + 1 > cap:
            return None
        diff = self._coords[:, None, :] - self._coords[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


@dataclass
class Solution:
    routes: list[list[int]]
    cost: float = 0.0


@dataclass(frozen=True)
class NormalizedView:
    scale: float
    offset: tuple[float, float]
    coords01: np.ndarray

    def denormalize(self) -> np.ndarray:
        return self.coords01 * self.scale + np.asarray(self.offset)


@dataclass
class Feasibility:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def euclidean_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def distance_row(inst: Instance, i: int) -> np.ndarray:
    if not 0 <= i <= inst.n:
        raise ContractViolation(f"node index {i} out of range 0..{inst.n}")
    diff = inst.coords - inst.coords[i]
    row = np.hypot(diff[..., 0], diff[..., 1])
    row[i] = 0.0
    return row


def _check_indices(inst: Instance, routes) -> None:
    for r, route in enumerate(routes):
        for c in route:
            if not (isinstance(c, (int, np.integer)) and 1 <= c <= inst.n):
                raise ContractViolation(f"route {r} references invalid customer {c!r}")


def route_cost(inst: Instance, route: Sequence[int]) -> float:
    if not route:
        return 0.0
    xy = inst.coords
    total = euclidean_distance(xy[0], xy[route[0]])
    for a, b in zip(route, route[1:]):
        total += euclidean_distance(xy[a], xy[b])
    return total + euclidean_distance(xy[route[-1]], xy[0])


def solution_cost(inst: Instance, sol: Solution | Sequence[Sequence[int]]) -> float:
    routes = sol.routes if isinstance(sol, Solution) else sol
    _check_indices(inst, routes)
    return math.fsum(route_cost(inst, r) for r in routes)


def check_feasible(inst: Instance, sol: Solution) -> Feasibility:
    violations = []
    seen = Counter()
    for r, route in enumerate(sol.routes):
        if not route:
            violations.append(f"empty: route {r}")
        load = 0.0
        for c in route:
            if not (isinstance(c, (int, np.integer)) and 1 <= c <= inst.n):
                violations.append(f"invalid: {c!r} in route {r}")
                continue
            seen[int(c)] += 1
            load += inst.demands[c]
        if load > inst.capacity:
            excess = load - inst.capacity
            excess_txt = f"{excess:g}"
            violations.append(f"capacity: route {r} exceeds by {excess_txt}")
    for c in sorted(seen):
        if seen[c] > 1:
            violations.append(f"duplicate: {c}")
    for c in range(1, inst.n + 1):
        if c not in seen:
            violations.append(f"missing: {c}")
    return Feasibility(violations)


def normalize_to_unit_square(inst: Instance) -> NormalizedView:
    xy = inst.coords
    lo = xy.min(axis=0)
    extent = xy.max(axis=0) - lo
    scale = float(extent.max())
    if scale <= 0.0:
        raise DegenerateGeometry("all nodes are coincident; cannot normalize")
    coords01 = np.clip((xy - lo) / scale, 0.0, 1.0)
    return NormalizedView(scale, (float(lo[0]), float(lo[1])), coords01)
