"""Reading and writing CVRPLib (VRPLIB) instances and solutions.

Only the EUC_2D flavour is supported. Distances are never rounded: costs
reported by this package are exact Euclidean lengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .instance import ContractViolation, Instance, Solution, check_feasible

SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")
MANDATORY_HEADERS = ("DIMENSION", "CAPACITY", "EDGE_WEIGHT_TYPE")


class VrplibError(ValueError):
    pass


class ParseError(VrplibError):
    pass


class StructuralError(VrplibError):
    pass


class UnsupportedFormat(VrplibError):
    pass


class SolutionRefused(VrplibError):
    pass


def _number(tok: str, lineno: int, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"line {lineno}: expected a number for {what}, got {tok[:40]!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"line {lineno}: non-finite {what} {tok[:40]!r}")
    return v


def _integer(tok: str, lineno: int, what: str) -> int:
    v = _number(tok, lineno, what)
    if v != int(v):
        raise ParseError(f"line {lineno}: {what} must be an integer, got {tok[:40]!r}")
    return int(v)


def _split_header(line: str):
    if ":" in line:
        key, _, value = line.partition(":")
        return key.strip().upper(), value.strip()
    parts = line.split(None, 1)
    return parts[0].upper(), (parts[1].strip() if len(parts) > 1 else "")


def parse_instance(text: Union[bytes, str]) -> Instance:
    """Parse a VRPLIB document into an :class:`Instance`.

    The depot becomes node 0 and customers are renumbered 1..n in the order
    they appear in NODE_COORD_SECTION. Unknown header keys (COMMENT, ...) are
    kept in the header map but otherwise ignored.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    header: dict[str, str] = {}
    coords: list[tuple[int, float, float, int]] = []
    demands: dict[int, int] = {}
    demand_lines: dict[int, int] = {}
    depots: list[int] = []
    seen_sections: dict[str, int] = {}
    section = None
    depot_closed = False
    lineno = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        head = line.split(None, 1)[0].rstrip(":").upper()
        if head == "EOF":
            break
        if head in SECTIONS:
            if head in seen_sections:
                raise ParseError(f"line {lineno}: {head} appears twice")
            seen_sections[head] = lineno
            section = head
            continue
        if section is None or (not _looks_numeric(line) and head.isidentifier()):
            key, value = _split_header(line)
            if not key:
                raise ParseError(f"line {lineno}: malformed header line")
            header[key] = value
            section = None
            continue
        toks = line.split()
        if section == "NODE_COORD_SECTION":
            if len(toks) != 3:
                raise ParseError(f"line {lineno}: NODE_COORD_SECTION entry needs 'id x y'")
            coords.append((_integer(toks[0], lineno, "node id"),
                           _number(toks[1], lineno, "x coordinate"),
                           _number(toks[2], lineno, "y coordinate"), lineno))
        elif section == "DEMAND_SECTION":
            if len(toks) != 2:
                raise ParseError(f"line {lineno}: DEMAND_SECTION entry needs 'id demand'")
            nid = _integer(toks[0], lineno, "node id")
            if nid in demands:
                raise StructuralError(f"line {lineno}: duplicate demand for node {nid}")
            demands[nid] = _integer(toks[1], lineno, "demand")
            demand_lines[nid] = lineno
        else:
            for tok in toks:
                v = _integer(tok, lineno, "depot id")
                if v == -1:
                    depot_closed = True
                elif depot_closed:
                    raise ParseError(f"line {lineno}: depot id after terminating -1")
                else:
                    depots.append(v)

    for key in MANDATORY_HEADERS:
        if key not in header:
            raise ParseError(f"{key} absent (header scan ended at line {lineno})")
    for sec in SECTIONS:
        if sec not in seen_sections:
            raise ParseError(f"{sec} absent (input ended at line {lineno})")

    ewt = header["EDGE_WEIGHT_TYPE"].upper()
    if ewt != "EUC_2D":
        raise UnsupportedFormat(f"EDGE_WEIGHT_TYPE {ewt} is not supported (only EUC_2D)")
    dim_line = header["DIMENSION"].split()
    if len(dim_line) != 1:
        raise ParseError(f"DIMENSION value {header['DIMENSION'][:40]!r} is not an integer")
    dimension = _integer(dim_line[0], 0, "DIMENSION")
    cap_tok = header["CAPACITY"].split()
    if len(cap_tok) != 1:
        raise ParseError(f"CAPACITY value {header['CAPACITY'][:40]!r} is not a number")
    capacity = _number(cap_tok[0], 0, "CAPACITY")

    if len(coords) != dimension:
        raise StructuralError(
            f"DIMENSION is {dimension} but NODE_COORD_SECTION has {len(coords)} entries")
    if len(demands) != dimension:
        raise StructuralError(
            f"DIMENSION is {dimension} but DEMAND_SECTION has {len(demands)} entries")
    ids = [c[0] for c in coords]
    if len(set(ids)) != len(ids):
        raise StructuralError("duplicate node id in NODE_COORD_SECTION")
    if set(ids) != set(demands):
        raise StructuralError("node ids differ between NODE_COORD_SECTION and DEMAND_SECTION")
    if len(depots) != 1:
        raise StructuralError(f"expected exactly one depot, found {len(depots)}")
    depot_id = depots[0]
    if depot_id not in demands:
        raise StructuralError(f"depot id {depot_id} is not a node")
    if demands[depot_id] != 0:
        raise StructuralError(
            f"line {demand_lines[depot_id]}: depot {depot_id} has nonzero demand {demands[depot_id]}")

    depot = next((x, y) for nid, x, y, _ in coords if nid == depot_id)
    customers = tuple((x, y, float(demands[nid])) for nid, x, y, _ in coords if nid != depot_id)
    try:
        return Instance(header.get("NAME", ""), depot, customers, capacity)
    except ContractViolation as exc:
        raise StructuralError(str(exc)) from None


def _looks_numeric(line: str) -> bool:
    tok = line.split(None, 1)[0]
    try:
        float(tok)
    except ValueError:
        return False
    return True


def read_instance(path: Union[str, Path]) -> Instance:
    return parse_instance(Path(path).read_bytes())


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2 ** 53 else repr(v)


def format_instance(inst: Instance) -> str:
    lines = [
        f"NAME : {inst.name or 'unnamed'}",
        "TYPE : CVRP",
        f"DIMENSION : {inst.n + 1}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {_fmt(inst.capacity)}",
        "NODE_COORD_SECTION",
    ]
    for i, (x, y) in enumerate(inst.coords, start=1):
        lines.append(f"{i} {_fmt(x)} {_fmt(y)}")
    lines.append("DEMAND_SECTION")
    for i, d in enumerate(inst.demands, start=1):
        lines.append(f"{i} {_fmt(d)}")
    lines += ["DEPOT_SECTION", "1", "-1", "EOF", ""]
    return "\n".join(lines)


def emit_solution(sol: Solution, cost: Optional[float] = None,
                  inst: Optional[Instance] = None) -> str:
    """Render ``sol`` in the CVRPLib .sol convention.

    Refuses empty routes and repeated customers; when ``inst`` is given the
    full feasibility check is applied as well.
    """
    cost = sol.cost if cost is None else cost
    seen = set()
    for k, route in enumerate(sol.routes):
        if not route:
            raise SolutionRefused(f"route {k} is empty")
        for c in route:
            if int(c) < 1:
                raise SolutionRefused(f"invalid customer id {c}")
            if c in seen:
                raise SolutionRefused(f"customer {c} visited twice")
            seen.add(c)
    if inst is not None:
        verdict = check_feasible(inst, sol)
        if not verdict.ok:
            raise SolutionRefused("; ".join(verdict.violations))
    lines = [f"Route #{k}: " + " ".join(str(int(c)) for c in route)
             for k, route in enumerate(sol.routes, start=1)]
    lines.append(f"Cost {_fmt(cost)}")
    return "\n".join(lines)


def parse_solution(text: str) -> Solution:
    routes = []
    cost = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.lower().startswith("route"):
            _, _, body = line.partition(":")
            routes.append([_integer(t, lineno, "customer id") for t in body.split()])
        elif line.lower().startswith("cost"):
            cost = _number(line.split()[1], lineno, "cost")
        else:
            raise ParseError(f"line {lineno}: unexpected content {line[:40]!r}")
    if cost is None:
        raise ParseError("Cost line absent")
    return Solution(routes, cost)


@dataclass(frozen=True)
class GenSpec:
    n: int
    demand_low: int = 1
    demand_high: int = 9
    capacity: float = 30
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ContractViolation(f"n must be >= 1, got {self.n}")
        if not 1 <= self.demand_low <= self.demand_high <= self.capacity:
            raise ContractViolation(
                f"need 1 <= demand_low <= demand_high <= capacity, got "
                f"{self.demand_low}, {self.demand_high}, {self.capacity}")


# Conventional capacities for uniform random instances.
DEFAULT_CAPACITY = {10: 20, 20: 30, 50: 40, 100: 50}


def default_capacity(n: int) -> int:
    if n in DEFAULT_CAPACITY:
        return DEFAULT_CAPACITY[n]
    return 30 if n < 50 else 50


def generate_instance(spec: GenSpec, name: Optional[str] = None) -> Instance:
    rng = np.random.default_rng(spec.seed)
    return _draw(rng, spec, name or f"rand-n{spec.n}-s{spec.seed}")


def _draw(rng: np.random.Generator, spec: GenSpec, name: str) -> Instance:
    xy = rng.random((spec.n + 1, 2))
    demand = rng.integers(spec.demand_low, spec.demand_high + 1, size=spec.n + 1)
    demand[0] = 0
    return Instance.from_arrays(xy, demand, spec.capacity, name=name)


def generate_batch(n: int, count: int, rng: np.random.Generator, capacity=None,
                   demand_low: int = 1, demand_high: int = 9) -> list[Instance]:
    capacity = default_capacity(n) if capacity is None else capacity
    spec = GenSpec(n, demand_low, demand_high, capacity, 0)
    return [_draw(rng, spec, f"rand-n{n}-{k}") for k in range(count)]


class BksRegistry(Mapping):
    """Best-known costs by exact instance name."""

    def __init__(self, entries: Optional[Mapping[str, float]] = None):
        self._costs = {}
        for name, cost in (entries or {}).items():
            if not cost > 0:
                raise ContractViolation(f"BKS for {name} must be positive, got {cost}")
            self._costs[name] = float(cost)

    def __getitem__(self, name):
        return self._costs[name]

    def __iter__(self):
        return iter(self._costs)

    def __len__(self):
        return len(self._costs)

    @classmethod
    def parse(cls, text: str) -> "BksRegistry":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"line {lineno}: expected '<name> <cost>'")
            entries[parts[0]] = _number(parts[1], lineno, "cost")
        return cls(entries)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "BksRegistry":
        if path is None:
            text = resources.files("darvrp").joinpath("data/bks.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)

    def merged(self, other: Mapping[str, float]) -> "BksRegistry":
        return BksRegistry({**self._costs, **dict(other)})


def lookup_bks(reg: Mapping[str, float], name: str) -> Optional[float]:
    return reg.get(name)
