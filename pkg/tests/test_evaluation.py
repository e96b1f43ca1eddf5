import numpy as np
import pytest

from darvrp.evaluation import (COLUMNS, DispersionStats, EvalRecord, GreedySolver, OracleSolver,
                               PolicySolver, ablate_k, dispersion_from_breakdowns,
                               dispersion_profile, evaluate, export, load_records,
                               parse_records, records_to_csv, records_to_json, reference_cost)
from darvrp.instance import Instance, Solution
from darvrp.policy import ScoreBreakdown, greedy_rollout

from conftest import SMALL, random_instance


class Broken:
    name = "broken"

    def solve(self, inst):
        raise RuntimeError("boom")


class Cheater:
    name = "cheater"

    def solve(self, inst):
        return Solution([[1]], 0.0)


def test_evaluate_cardinality_and_statuses():
    insts = [random_instance(5, s) for s in range(3)]
    refs = {insts[0].name: 2.0}
    records = evaluate([GreedySolver(), OracleSolver(), Broken(), Cheater()], insts, refs)
    assert len(records) == 3 * 4
    by = {(r.instance, r.solver): r for r in records}
    assert by[(insts[0].name, "greedy")].gap is not None
    assert by[(insts[1].name, "greedy")].gap is None  # unknown reference: empty gap
    assert by[(insts[1].name, "broken")].status == "error: boom"
    assert by[(insts[1].name, "cheater")].status.startswith("infeasible: missing")
    assert by[(insts[2].name, "exact")].cost <= by[(insts[2].name, "greedy")].cost


def test_reference_cost_order():
    inst = random_instance(5, 1)
    assert reference_cost(inst, {inst.name: 7.0}) == 7.0
    with_bks = Instance(inst.name, inst.depot, inst.customers, inst.capacity, bks=3.0)
    assert reference_cost(with_bks) == 3.0
    from darvrp.baselines import exact_optimum, greedy_nearest
    assert reference_cost(inst) == exact_optimum(inst).optimal_cost
    big = random_instance(12, 1)
    assert reference_cost(big) == greedy_nearest(big).cost


def sample_records():
    return [
        EvalRecord("a", "greedy", 12.5, 3.25, 0.01),
        EvalRecord("a", "dar", None, None, 0.5, "error: x, with comma"),
        EvalRecord("b", "dar", 1 / 3, None, 0.2, dispersion=DispersionStats(1, 10, 4, 0.4, -1.0)),
    ]


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_roundtrip(tmp_path, fmt):
    recs = sample_records()
    path = export(recs, fmt, tmp_path / f"out.{fmt}")
    assert load_records(path) == recs


def test_csv_header_and_empty():
    text = records_to_csv([])
    lines = text.splitlines()
    assert lines[0] == "# darvrp-eval schema_version=1"
    assert lines[1].split(",") == list(COLUMNS)
    assert parse_records(text) == []
    assert parse_records(records_to_json([])) == []


def test_parse_rejects_unknown_schema():
    with pytest.raises(ValueError):
        parse_records("instance,solver\n")
    with pytest.raises(ValueError):
        parse_records('{"schema_version": 99, "records": []}')
    with pytest.raises(ValueError):
        export([], "xml", "/tmp/never")


def test_dispersion_counts():
    bd = ScoreBreakdown(np.zeros(4), np.zeros(4), np.zeros(4),
                        np.array([-np.inf, 5.0, -1.0, -0.5]), np.zeros(4), 1,
                        np.array([False, True, True, True]))
    (s,) = dispersion_from_breakdowns([bd], tau=-1.0)
    assert (s.step, s.candidates, s.count, s.fraction) == (1, 3, 2, 2 / 3)


def test_dispersion_profile_matches_brute_force(small_params):
    inst = random_instance(30, 3)
    stats, trace = dispersion_profile(inst, small_params, SMALL, tau=-1.0, steps=3)
    _, again = greedy_rollout(inst, small_params, SMALL, trace_steps=3)
    assert len(stats) == 3
    for s, bd in zip(stats, again):
        feasible = [j for j in range(inst.n + 1) if bd.feasible[j]]
        count = sum(1 for j in feasible if bd.clipped[j] > -1.0)
        assert s.candidates == len(feasible) and s.count == count


def test_policy_solver_batches_like_single(small_params):
    insts = [random_instance(8, s) for s in range(3)] + [random_instance(5, 9)]
    solver = PolicySolver(small_params, SMALL)
    assert solver.name == "dar-K100"
    many = solver.solve_many(insts)
    for inst, sol in zip(insts, many):
        assert sol.cost == pytest.approx(solver.solve(inst).cost, rel=1e-12)


def test_ablate_k_shape(small_params):
    insts = [random_instance(10, s) for s in range(2)]
    rows = ablate_k(insts, small_params, SMALL, [2, 5], reference=lambda i: 1.0)
    assert [k for k, _ in rows] == [2, 5]
    assert all(np.isfinite(g) for _, g in rows)
