"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in the terminal summary (see conftest.py).
Criteria 6, 8, 9 and 10 share one desk training run per variant, done once
per session.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from darvrp import kernel as K
from darvrp.baselines import exact_optimum, gap, greedy_nearest
from darvrp.cli import main
from darvrp.evaluation import dispersion_from_breakdowns
from darvrp.instance import Instance, check_feasible, normalize_to_unit_square
from darvrp.policy import (PolicyConfig, RolloutState, attention_scores, base_policy_probs,
                           decoder_context, distance_scores, encode, greedy_rollout,
                           greedy_solve_many, init_params, make_batch, rollout, step_policy,
                           BatchState, decoder_cache, encode_batch, step_scores)
from darvrp.training import TrainConfig, batch_size_for, reinforce_loss, train
from darvrp.vrplib import VrplibError, generate_batch, parse_instance, read_instance

from conftest import random_instance, report

DATA = Path(__file__).parent / "data"

# desk recipe shared by criteria 6, 8, 9, 10
DESK = dict(n_low=20, steps=2000, batch_cap=32, seed=1234, embedding_dim=64)
HELD_OUT_SEED = 999
N200_SEED = 2024
N200_COUNT = 50


def verdict(number, ok, detail):
    report(number, ok, detail)
    assert ok, f"criterion {number}: {detail}"


# --- shared fixtures ---------------------------------------------------------


@pytest.fixture(scope="session")
def desk_models():
    models = {}
    for dar in (True, False):
        cfg = TrainConfig(dar_enabled=dar, **DESK)
        t0 = time.perf_counter()
        store, _ = train(cfg)
        models[dar] = (store, cfg, time.perf_counter() - t0)
    return models


@pytest.fixture(scope="session")
def n200_set():
    return generate_batch(200, N200_COUNT, np.random.default_rng(N200_SEED))


@pytest.fixture(scope="session")
def n200_runs(desk_models, n200_set):
    """Greedy decoding at N=200 with the first-decision breakdown, per variant."""
    runs = {}
    for dar in (True, False):
        store, tcfg, _ = desk_models[dar]
        cfg = tcfg.policy_config()
        costs, fractions = [], []
        for inst in n200_set:
            sol, trace = greedy_rollout(inst, store, cfg, trace_steps=1)
            assert check_feasible(inst, sol).ok
            costs.append(sol.cost)
            fractions.append(dispersion_from_breakdowns(trace, tau=-1.0)[0].fraction)
        runs[dar] = (np.array(costs), float(np.mean(fractions)))
    return runs


# --- criteria ----------------------------------------------------------------


def test_criterion_01_table3_gaps():
    pairs = [(206866, 192848), (129282, 111395), (509886, 477277), (327887, 291350),
             (504399, 469531), (295858, 257748)]
    printed = [7.27, 16.06, 6.83, 12.54, 7.43, 14.79]
    got = [gap(c, r) for c, r in pairs]
    ok = all(abs(g - p) <= 0.01 + 1e-9 for g, p in zip(got, printed))
    verdict(1, ok, f"gaps {got} vs printed {printed}")


def test_criterion_02_batch_formula():
    a, b = batch_size_for(100), batch_size_for(500)
    verdict(2, a == 120 and b == 9, f"batch_size_for(100)={a}, batch_size_for(500)={b}")


def test_criterion_03_distance_score_values():
    inst = Instance("eq", (0, 0), [(0.1, 0, 1), (1.0, 0, 1), (0, 1.2, 1)], 10)
    b = distance_scores(inst, 0, 2, normalize=False)
    ok = b[2] == 0.0 and abs(b[3] + 1.2) < 1e-12 and abs(b[1] - 2.302585) <= 1e-6 \
        and abs(b[1] + math.log(0.1)) <= 1e-9
    verdict(3, ok, f"d=1 -> {float(b[2]):g}, d=1.2 -> {float(b[3]):g}, "
                   f"d=0.1 -> {float(b[1]):.9f}")


def test_criterion_04_dar_reduction():
    cfg = PolicyConfig(dar_enabled=False)
    params = init_params(cfg, seed=4)
    rng = np.random.default_rng(4)
    steps = mismatches = 0
    seed = 0
    while steps < 1000:
        inst = random_instance(int(rng.integers(5, 40)), 10_000 + seed, capacity=20)
        seed += 1
        emb = encode(inst, params, cfg)
        batch = make_batch([inst], cfg)
        state = RolloutState.start(inst)
        while steps < 1000 and not (state.visited[1:].all() and state.current == 0):
            probs, _ = step_policy(inst, emb, state, cfg, params, batch)
            # independent route: single-step context -> raw compatibilities -> base softmax
            ctx = decoder_context(inst, emb, state, params, cfg)
            a = attention_scores(ctx, emb, params, cfg).detach()
            base = base_policy_probs(a, torch.from_numpy(state.feasible()), cfg.C)
            mismatches += not torch.equal(probs.detach(), base)
            steps += 1
            state.move(int(rng.choice(np.flatnonzero(state.feasible()))))
    verdict(4, mismatches == 0, f"{steps} steps, {mismatches} non-identical probability vectors")


def _nearest_feasible(inst, current, feasible):
    d = np.linalg.norm(inst.coords - inst.coords[current], axis=1)
    d[~feasible] = np.inf
    return int(np.argmin(d)), d


def test_criterion_05_distance_dominance():
    rng = np.random.default_rng(5)
    compared = excluded_depot = excluded_topk = mismatches = 0
    rollout_steps = rollout_bad = 0
    for idx in range(200):
        n = int(rng.integers(1, 51))
        k = int(rng.choice([5, 20, 100]))
        cfg = PolicyConfig(K=k, zero_attention=True, embedding_dim=16, heads=2,
                           encoder_layers=1, ff_hidden=16)
        params = init_params(cfg, seed=idx)
        inst = random_instance(n, 50_000 + idx, capacity=int(rng.choice([15, 30])))
        emb = encode(inst, params, cfg)
        batch = make_batch([inst], cfg)
        # replay greedy_nearest's own trajectory, step by step
        sol = greedy_nearest(inst)
        sequence = [c for r in sol.routes for c in [*r, 0]]
        state = RolloutState.start(inst)
        for choice in sequence:
            probs, bd = step_policy(inst, emb, state, cfg, params, batch)
            feasible = state.feasible()
            in_topk = _top_k(inst, state.current, k)
            _, d = _nearest_feasible(inst, state.current, feasible)
            if not in_topk[feasible].all():
                excluded_topk += 1
            elif choice != 0 and feasible[0] and d[0] < d[choice]:
                excluded_depot += 1
            else:
                compared += 1
                mismatches += int(probs.argmax()) != choice
            state.move(choice)
        # the zero-attention rollout itself always takes the nearest feasible node
        _, trace = greedy_rollout(inst, params, cfg, trace_steps=10 * inst.n + 10)
        for prev, nxt in zip(trace, trace[1:]):
            rollout_steps += 1
            near, _ = _nearest_feasible(inst, prev.current, prev.feasible)
            rollout_bad += near != nxt.current
    ok = mismatches == 0 and rollout_bad == 0 and compared > 0
    verdict(5, ok, f"{compared} greedy steps compared, {mismatches} mismatches "
                   f"(excluded: {excluded_depot} depot-nearer, {excluded_topk} outside top-K); "
                   f"rollout nearest-feasible violations {rollout_bad}/{rollout_steps}")


def _top_k(inst, i, k):
    xy = normalize_to_unit_square(inst).coords01
    d = np.linalg.norm(xy - xy[i], axis=1)
    order = sorted((j for j in range(inst.n + 1) if j != i), key=lambda j: (d[j], j))
    member = np.zeros(inst.n + 1, dtype=bool)
    member[order[:k]] = True
    return member


@pytest.mark.slow
def test_criterion_06_oracle_dominance(desk_models):
    store, tcfg, _ = desk_models[True]
    cfg = tcfg.policy_config()
    rng = np.random.default_rng(6)
    insts = [random_instance(int(rng.integers(4, 9)), 60_000 + i) for i in range(300)]
    policy = greedy_solve_many(insts, store, cfg, chunk=64)
    worse_greedy = worse_policy = strict = 0
    for inst, pol in zip(insts, policy):
        opt = exact_optimum(inst).optimal_cost
        g = greedy_nearest(inst).cost
        worse_greedy += opt > g + 1e-9
        worse_policy += opt > pol.cost + 1e-9
        strict += opt < g - 1e-9
    ok = worse_greedy == 0 and worse_policy == 0 and strict >= 0.3 * len(insts)
    verdict(6, ok, f"oracle above greedy {worse_greedy}, above policy {worse_policy}, "
                   f"strictly below greedy on {strict}/{len(insts)}")


def _fd_ok(f, x, failures, label):
    x.requires_grad_(True)
    x.grad = None
    f().backward()
    analytic = x.grad.clone()
    numeric = K.numerical_gradient(f, x, eps=1e-5)
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-3)
    err = (analytic - numeric).abs().max().item() / scale
    if err > 1e-4:
        failures.append(f"{label}: {err:.2e}")
    return err


def test_criterion_07_gradient_soundness():
    gen = torch.Generator().manual_seed(7)
    r = lambda *s: torch.rand(s, generator=gen, dtype=K.DTYPE) * 2 - 1
    failures, worst, checks = [], 0.0, 0
    for trial in range(3):
        x, W, bias = r(3, 5), r(5, 4), r(4)
        for t, name in ((x, "x"), (W, "W"), (bias, "b")):
            worst = max(worst, _fd_ok(lambda: (K.linear(x, W, bias) ** 2).sum(), t, failures,
                                      f"linear.{name}"))
            checks += 1
        s, wts = r(4, 6), r(4, 6)
        mask = torch.rand(4, 6, generator=gen) > 0.4
        mask[:, trial] = True
        worst = max(worst, _fd_ok(lambda: (K.softmax(s, mask).nan_to_num() * wts).sum(), s,
                                  failures, "softmax"))
        q, k, v, Wo, bo = r(2, 3, 4), r(2, 5, 4), r(2, 5, 4), r(4, 4), r(4)
        am = torch.rand(2, 3, 5, generator=gen) > 0.3
        am[..., 0] = True
        for t, name in ((q, "q"), (k, "k"), (v, "v"), (Wo, "Wo"), (bo, "bo")):
            worst = max(worst, _fd_ok(
                lambda: K.multi_head_attention(q, k, v, 2, am, Wo, bo).sin().sum(), t, failures,
                f"mha.{name}"))
            checks += 1
        h, nw, nb, proj = r(2, 6, 3), r(3), r(3), r(2, 6, 3)
        for t, name in ((h, "x"), (nw, "w"), (nb, "b")):
            worst = max(worst, _fd_ok(lambda: (K.instance_norm(h, nw, nb) * proj).sum(), t,
                                      failures, f"norm.{name}"))
            checks += 1
        checks += 1

    # REINFORCE loss through a randomized small policy, every parameter
    cfg = PolicyConfig(embedding_dim=4, heads=2, encoder_layers=1, ff_hidden=4)
    store = init_params(cfg, seed=7)
    insts = [random_instance(4, s, capacity=12) for s in (1, 2)]
    batch = make_batch(insts, cfg)
    with torch.no_grad():
        ref = rollout(store, cfg, batch, 4, "sample", generator=torch.Generator().manual_seed(7))

    def loss_fn():
        h = encode_batch(store, cfg, batch)
        cache = decoder_cache(store, cfg, h)
        state = BatchState.start(batch, 4)
        state.apply(ref.actions[..., 0])
        lp = torch.zeros(2, 4, dtype=K.DTYPE)
        for t in range(1, ref.actions.shape[-1]):
            s = step_scores(store, cfg, batch, cache, state.current, state.remaining,
                            state.feasible())
            lp = lp + torch.log(s.probs.gather(-1, ref.actions[..., t:t + 1]).squeeze(-1))
            state.apply(ref.actions[..., t])
        return reinforce_loss(-ref.costs, lp)

    for name in store.names():
        worst = max(worst, _fd_ok(loss_fn, store[name], failures, f"reinforce.{name}"))
        checks += 1
    verdict(7, not failures, f"{checks} gradient checks, worst relative error {worst:.2e}"
                             + (f"; failures {failures[:5]}" if failures else ""))


@pytest.mark.slow
def test_criterion_08_desk_training(desk_models, n200_runs):
    store, tcfg, seconds = desk_models[True]
    cfg = tcfg.policy_config()
    held = generate_batch(20, 100, np.random.default_rng(HELD_OUT_SEED))
    untrained = init_params(cfg, tcfg.seed)
    before = np.mean([s.cost for s in greedy_solve_many(held, untrained, cfg)])
    after = np.mean([s.cost for s in greedy_solve_many(held, store, cfg)])
    improvement = (before - after) / before * 100
    dar_cost, base_cost = n200_runs[True][0].mean(), n200_runs[False][0].mean()
    total = seconds + desk_models[False][2]
    ok = improvement >= 5.0 and dar_cost <= base_cost
    verdict(8, ok, f"N=20 held-out: untrained {before:.4f} -> trained {after:.4f} "
                   f"({improvement:.2f}% better); N=200: DAR {dar_cost:.4f} vs no-DAR "
                   f"{base_cost:.4f}; training {total:.0f}s")


@pytest.mark.slow
def test_criterion_09_dispersion(n200_runs):
    with_dar, without = n200_runs[True][1], n200_runs[False][1]
    verdict(9, with_dar < without,
            f"fraction of feasible first-step scores > -1: DAR {with_dar:.4f}, "
            f"no-DAR {without:.4f}")


@pytest.mark.slow
def test_criterion_10_k_ablation(desk_models, n200_set, n200_runs):
    store, tcfg, _ = desk_models[True]
    cfg = tcfg.policy_config()
    ref = np.array([greedy_nearest(inst).cost for inst in n200_set])
    gaps = {}
    for k in (5, 20):
        sols = greedy_solve_many(n200_set, store, cfg.with_(K=k), chunk=8)
        gaps[k] = float(np.mean([(s.cost - r) / r * 100 for s, r in zip(sols, ref)]))
    if cfg.K == 100:
        gaps[100] = float(np.mean((n200_runs[True][0] - ref) / ref * 100))
    else:
        sols = greedy_solve_many(n200_set, store, cfg.with_(K=100), chunk=8)
        gaps[100] = float(np.mean([(s.cost - r) / r * 100 for s, r in zip(sols, ref)]))
    pairs = [(5, 20), (20, 100), (5, 100)]
    good = sum(gaps[b] <= gaps[a] for a, b in pairs)
    verdict(10, good >= 2, "mean gap to greedy " + ", ".join(
        f"K={k}: {g:.3f}%" for k, g in gaps.items()) + f"; non-increasing pairs {good}/3")


def _mutate(data: bytes, rng) -> bytes:
    kind = rng.integers(8)
    b = bytearray(data)
    if kind == 0 and b:  # flip bytes
        for _ in range(rng.integers(1, 6)):
            b[rng.integers(len(b))] = rng.integers(256)
    elif kind == 1 and b:  # delete a span
        i = rng.integers(len(b))
        del b[i:i + rng.integers(1, 40)]
    elif kind == 2:  # insert random bytes
        i = rng.integers(len(b) + 1)
        b[i:i] = rng.integers(0, 256, rng.integers(1, 20), dtype=np.uint8).tobytes()
    elif kind == 3:  # truncate
        b = b[:rng.integers(len(b) + 1)]
    else:
        lines = bytes(b).split(b"\n")
        i, j = rng.integers(len(lines)), rng.integers(len(lines))
        if kind == 4:
            lines.insert(j, lines[i])
        elif kind == 5:
            lines[i], lines[j] = lines[j], lines[i]
        elif kind == 6:
            tokens = lines[i].split()
            if tokens:
                tokens[rng.integers(len(tokens))] = rng.choice(
                    [b"-1", b"0", b"1e309", b"nan", b"inf", b"-0", b"99999999999999999999",
                     b"x", b":", b"", b"3.5", b"EOF", b"DEPOT_SECTION"])
            lines[i] = b" ".join(tokens)
        else:
            del lines[i]
        b = bytearray(b"\n".join(lines))
    return bytes(b)


def test_criterion_11_parser_robustness():
    golden = []
    inst = read_instance(DATA / "minimal.vrp")
    golden.append(inst.n == 2 and inst.capacity == 30)
    inst = read_instance(DATA / "colon_styles.vrp")
    golden.append(inst.n == 3 and inst.depot == (50.0, 50.0))
    inst = read_instance(DATA / "x_style_n101.vrp")
    golden.append(inst.n == 100 and inst.capacity == 206)
    seeds = [(DATA / name).read_bytes() for name in
             ("minimal.vrp", "colon_styles.vrp", "minimal.vrp", "colon_styles.vrp",
              "x_style_n101.vrp")]
    rng = np.random.default_rng(11)
    crashes, parsed, rejected = [], 0, 0
    t0 = time.perf_counter()
    for _ in range(100_000):
        data = seeds[rng.integers(len(seeds))]
        for _ in range(rng.integers(1, 4)):
            data = _mutate(data, rng)
        try:
            parse_instance(data)
            parsed += 1
        except VrplibError:
            rejected += 1
        except Exception as exc:  # anything else is a crash
            crashes.append(f"{type(exc).__name__}: {exc}")
    ok = all(golden) and not crashes
    verdict(11, ok, f"golden fixtures {sum(golden)}/{len(golden)}; fuzz 100000 inputs: "
                    f"{parsed} parsed, {rejected} rejected, {len(crashes)} crashes "
                    f"in {time.perf_counter() - t0:.0f}s" + (f" {crashes[:3]}" if crashes else ""))


def test_criterion_12_determinism(tmp_path):
    cfg = tmp_path / "desk.cfg"
    cfg.write_text("steps = 5\nn_low = 10\nbatch_cap = 8\nseed = 12\n")
    ck = [tmp_path / f"m{i}.ckpt" for i in range(2)]
    codes = [main(["train", str(cfg), "-o", str(p)]) for p in ck]
    inst = tmp_path / "i.vrp"
    codes.append(main(["generate", "-n", "30", "--seed", "12", "-o", str(inst)]))
    sols = [tmp_path / f"s{i}.sol" for i in range(2)]
    codes += [main(["solve", str(inst), "--checkpoint", str(ck[0]), "--seed", "12",
                    "-o", str(s)]) for s in sols]
    same_ckpt = ck[0].read_bytes() == ck[1].read_bytes()
    same_sol = sols[0].read_bytes() == sols[1].read_bytes()
    ok = codes == [0] * 5 and same_ckpt and same_sol
    verdict(12, ok, f"exit codes {codes}; checkpoints identical {same_ckpt}; "
                    f"solutions identical {same_sol}")
