"""Batch evaluation: costs and gaps, attention dispersion, K ablation, exports."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .baselines import ORACLE_LIMIT, exact_optimum, gap, greedy_nearest
from .instance import Instance, Solution, check_feasible
from .kernel import ParamStore
from .policy import PolicyConfig, ScoreBreakdown, greedy_rollout, greedy_solve_many

SCHEMA_VERSION = 1
COLUMNS = ("instance", "solver", "cost", "gap", "seconds", "status",
           "disp_step", "disp_candidates", "disp_count", "disp_fraction", "disp_tau")


class Solver(Protocol):
    name: str

    def solve(self, inst: Instance) -> Solution: ...


class GreedySolver:
    name = "greedy"

    def solve(self, inst):
        return greedy_nearest(inst)


class OracleSolver:
    name = "exact"

    def __init__(self, limit: int = ORACLE_LIMIT):
        self.limit = limit

    def solve(self, inst):
        return exact_optimum(inst, self.limit).optimal_solution


class PolicySolver:
    """Greedy multi-start decoding of a trained policy."""

    def __init__(self, params: ParamStore, cfg: PolicyConfig, m: Optional[int] = None,
                 name: Optional[str] = None):
        self.params, self.cfg, self.m = params, cfg, m
        self.name = name or ("dar" if cfg.dar_enabled else "base") + f"-K{cfg.K}"

    def solve(self, inst):
        return greedy_rollout(inst, self.params, self.cfg, self.m)[0]

    def solve_many(self, instances):
        return greedy_solve_many(instances, self.params, self.cfg, self.m)


@dataclass
class DispersionStats:
    step: int
    candidates: int
    count: int
    fraction: float
    tau: float


@dataclass
class EvalRecord:
    instance: str
    solver: str
    cost: Optional[float]
    gap: Optional[float]
    seconds: float
    status: str = "ok"
    dispersion: Optional[DispersionStats] = None

    def row(self) -> dict:
        d = self.dispersion
        return {
            "instance": self.instance, "solver": self.solver, "cost": self.cost,
            "gap": self.gap, "seconds": self.seconds, "status": self.status,
            "disp_step": d.step if d else None, "disp_candidates": d.candidates if d else None,
            "disp_count": d.count if d else None, "disp_fraction": d.fraction if d else None,
            "disp_tau": d.tau if d else None,
        }

    @classmethod
    def from_row(cls, row: Mapping) -> "EvalRecord":
        disp = None
        if row.get("disp_step") is not None:
            disp = DispersionStats(int(row["disp_step"]), int(row["disp_candidates"]),
                                   int(row["disp_count"]), float(row["disp_fraction"]),
                                   float(row["disp_tau"]))
        opt = lambda v: None if v is None else float(v)
        return cls(row["instance"], row["solver"], opt(row["cost"]), opt(row["gap"]),
                   float(row["seconds"]), row["status"], disp)


def reference_cost(inst: Instance, refs: Optional[Mapping[str, float]] = None,
                   exact_limit: int = 8) -> float:
    """Best available reference: registry BKS, then instance BKS, then exact, then greedy."""
    if refs is not None and inst.name in refs:
        return refs[inst.name]
    if inst.bks is not None:
        return inst.bks
    if inst.n <= exact_limit:
        return exact_optimum(inst).optimal_cost
    return greedy_nearest(inst).cost


def evaluate(solvers: Sequence[Solver], instances: Sequence[Instance],
             refs: Optional[Mapping[str, float]] = None) -> list[EvalRecord]:
    records = []
    for inst in instances:
        ref = refs.get(inst.name) if refs is not None else None
        if ref is None:
            ref = inst.bks
        for solver in solvers:
            t0 = time.perf_counter()
            try:
                sol = solver.solve(inst)
            except Exception as exc:  # a broken solver must not stop the run
                records.append(EvalRecord(inst.name, solver.name, None, None,
                                          time.perf_counter() - t0, f"error: {exc}"))
                continue
            seconds = time.perf_counter() - t0
            verdict = check_feasible(inst, sol)
            if not verdict.ok:
                records.append(EvalRecord(inst.name, solver.name, None, None, seconds,
                                          "infeasible: " + "; ".join(verdict.violations[:5])))
                continue
            cost = sol.cost
            records.append(EvalRecord(inst.name, solver.name, cost,
                                      gap(cost, ref) if ref else None, seconds))
    return records


def dispersion_from_breakdowns(breakdowns: Sequence[ScoreBreakdown], tau: float = -1.0,
                               first_step: int = 1) -> list[DispersionStats]:
    out = []
    for s, bd in enumerate(breakdowns, start=first_step):
        feasible = bd.feasible if bd.feasible is not None else np.isfinite(bd.clipped)
        scores = bd.clipped[feasible]
        count = int((scores > tau).sum())
        cand = int(feasible.sum())
        out.append(DispersionStats(s, cand, count, count / cand if cand else 0.0, tau))
    return out


def dispersion_profile(inst: Instance, params: ParamStore, cfg: PolicyConfig, tau: float = -1.0,
                       steps: int = 1, m: Optional[int] = None):
    """Dispersion of the clipped scores over the first ``steps`` policy decisions.

    The decisions are those of the trajectory returned by greedy decoding;
    step 1 is the first choice made after the forced start customer.
    Returns ``(stats, breakdowns)``.
    """
    _, trace = greedy_rollout(inst, params, cfg, m, trace_steps=steps)
    return dispersion_from_breakdowns(trace, tau), trace


def ablate_k(instances: Sequence[Instance], params: ParamStore, cfg: PolicyConfig,
             k_values: Sequence[int], refs: Optional[Mapping[str, float]] = None,
             m: Optional[int] = None,
             reference: Optional[Callable[[Instance], float]] = None) -> list[tuple[int, float]]:
    """Mean gap per neighbour count K, with K changed at inference time only."""
    reference = reference or (lambda inst: reference_cost(inst, refs))
    ref = [reference(inst) for inst in instances]
    rows = []
    for k in k_values:
        kcfg = cfg.with_(K=int(k), dar_enabled=True)
        sols = greedy_solve_many(instances, params, kcfg, m)
        gaps = [(s.cost - r) / r * 100.0 for s, r in zip(sols, ref)]
        rows.append((int(k), float(np.mean(gaps))))
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    buf.write(f"# darvrp-eval schema_version={SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        row = rec.row()
        w.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def records_to_json(records: Sequence[EvalRecord]) -> str:
    payload = {"schema_version": SCHEMA_VERSION, "columns": list(COLUMNS),
               "records": [rec.row() for rec in records]}
    return json.dumps(payload, indent=1) + "\n"


def parse_records(text: str) -> list[EvalRecord]:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        payload = json.loads(text)
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {payload.get('schema_version')}")
        return [EvalRecord.from_row(r) for r in payload["records"]]
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#") or f"schema_version={SCHEMA_VERSION}" not in lines[0]:
        raise ValueError("missing or unsupported schema version line")
    reader = csv.DictReader(lines[1:])
    out = []
    for row in reader:
        out.append(EvalRecord.from_row({k: (v if v != "" else None) for k, v in row.items()}))
    return out


def export(records: Sequence[EvalRecord], fmt: str, path) -> Path:
    if fmt == "csv":
        text = records_to_csv(records)
    elif fmt == "json":
        text = records_to_json(records)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    path = Path(path)
    path.write_text(text)
    return path


def load_records(path) -> list[EvalRecord]:
    return parse_records(Path(path).read_text())


def stats_to_csv(stats: Sequence[DispersionStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(DispersionStats)]
    w.writerow(names)
    for s in stats:
        w.writerow([_fmt(v) for v in asdict(s).values()])
    return buf.getvalue()
