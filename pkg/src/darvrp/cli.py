"""Command line entry point: ``darvrp <command>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant failure.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import torch

from . import kernel
from .baselines import exact_optimum, greedy_nearest
from .evaluation import (GreedySolver, PolicySolver, ablate_k, dispersion_profile, evaluate,
                         export, stats_to_csv)
from .instance import ContractViolation, check_feasible
from .policy import config_from_params, export_breakdowns, greedy_rollout
from .training import load_config, train
from .vrplib import (BksRegistry, GenSpec, VrplibError, default_capacity, emit_solution,
                     format_instance, generate_instance, read_instance)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class InvariantFailure(click.ClickException):
    exit_code = EXIT_INTERNAL


def _setup(threads: int, seed: int) -> None:
    torch.set_num_threads(max(1, threads))
    torch.manual_seed(seed)


def _instances(path: Path):
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".vrp")
    if not files:
        raise DataError(f"no .vrp files in {path}")
    return [_read(p) for p in files]


def _read(path):
    try:
        inst = read_instance(path)
    except (VrplibError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if not inst.name:
        inst = type(inst)(Path(path).stem, inst.depot, inst.customers, inst.capacity)
    return inst


def _policy(checkpoint, dar, k, normalize):
    try:
        params = kernel.load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise DataError(f"{checkpoint}: {exc}") from None
    return params, config_from_params(params, dar_enabled=dar, K=k, normalize_inputs=normalize)


common = [
    click.option("--seed", default=0, show_default=True, help="Random seed."),
    click.option("--threads", default=1, show_default=True, help="CPU threads for torch."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def cli(verbose):
    """Distance-aware attention reshaping for CVRP construction policies."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("-n", "--customers", "n", type=int, required=True)
@click.option("--demand-low", default=1, show_default=True)
@click.option("--demand-high", default=9, show_default=True)
@click.option("--capacity", type=float, default=None, help="Default depends on n.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@with_common
def generate(n, demand_low, demand_high, capacity, output, seed, threads):
    """Write a random uniform instance in VRPLIB format."""
    cap = default_capacity(n) if capacity is None else capacity
    try:
        spec = GenSpec(n, demand_low, demand_high, cap, seed)
    except ContractViolation as exc:
        raise click.UsageError(str(exc)) from None
    Path(output).write_text(format_instance(generate_instance(spec)))


@cli.command(name="train")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Checkpoint to write.")
@click.option("--init", "init_ckpt", type=click.Path(exists=True, dir_okay=False),
              help="Continue from this checkpoint (e.g. phase 2 after phase 1).")
@click.option("--report", type=click.Path(dir_okay=False), help="Per-step CSV report.")
@click.option("--normalize/--no-normalize", default=None)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--threads", default=1, show_default=True)
def train_cmd(config, output, init_ckpt, report, normalize, seed, threads):
    """Train a policy from a key = value config file."""
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if normalize is not None:
        overrides["normalize_inputs"] = normalize
    try:
        cfg = load_config(config, **overrides)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{config}: {exc}") from None
    _setup(threads, cfg.seed)
    store = kernel.load_checkpoint(init_ckpt) if init_ckpt else None
    store, rep = train(cfg, store, report)
    kernel.save_checkpoint(store, output)
    click.echo(f"trained {len(rep.rows)} steps in {rep.wall_clock:.1f}s -> {output}")


@cli.command()
@click.argument("instance", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--solver", type=click.Choice(["policy", "greedy", "exact"]), default="policy",
              show_default=True)
@click.option("--dar/--no-dar", default=True, show_default=True)
@click.option("-K", "k", default=100, show_default=True, help="Neighbour count for DAR.")
@click.option("-m", "m", type=int, default=None, help="Multi-start trajectories (default n).")
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@with_common
def solve(instance, checkpoint, solver, dar, k, m, normalize, output, seed, threads):
    """Solve one instance and write a .sol file."""
    _setup(threads, seed)
    inst = _read(instance)
    if solver == "policy":
        if checkpoint is None:
            raise click.UsageError("--checkpoint is required for the policy solver")
        params, cfg = _policy(checkpoint, dar, k, normalize)
        sol, _ = greedy_rollout(inst, params, cfg, m)
    elif solver == "greedy":
        sol = greedy_nearest(inst)
    else:
        try:
            sol = exact_optimum(inst).optimal_solution
        except ContractViolation as exc:
            raise click.UsageError(str(exc)) from None
    if not check_feasible(inst, sol).ok:
        raise InvariantFailure("solver returned an infeasible solution")
    Path(output).write_text(emit_solution(sol, sol.cost, inst) + "\n")


@cli.command(name="eval")
@click.argument("instance_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--registry", type=click.Path(exists=True, dir_okay=False),
              help="BKS table; the bundled one is used otherwise.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--solvers", default="greedy,dar,base", show_default=True,
              help="Comma list from greedy, dar, base.")
@click.option("-K", "k", default=100, show_default=True)
@click.option("-m", "m", type=int, default=None)
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Records file; .json gives JSON, anything else CSV.")
@with_common
def eval_cmd(instance_dir, registry, checkpoint, solvers, k, m, normalize, output, seed, threads):
    """Evaluate solvers over a directory of .vrp files."""
    _setup(threads, seed)
    refs = BksRegistry.load(registry)
    chosen = []
    for name in solvers.split(","):
        name = name.strip()
        if name == "greedy":
            chosen.append(GreedySolver())
        elif name in ("dar", "base"):
            if checkpoint is None:
                raise click.UsageError(f"solver {name} needs --checkpoint")
            params, cfg = _policy(checkpoint, name == "dar", k, normalize)
            chosen.append(PolicySolver(params, cfg, m, name=name))
        else:
            raise click.UsageError(f"unknown solver {name!r}")
    records = evaluate(chosen, _instances(Path(instance_dir)), refs)
    export(records, "json" if output.endswith(".json") else "csv", output)


@cli.command()
@click.argument("instance", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tau", default=-1.0, show_default=True, help="Score threshold.")
@click.option("--steps", default=1, show_default=True, help="Decisions to profile.")
@click.option("--dar/--no-dar", default=True, show_default=True)
@click.option("-K", "k", default=100, show_default=True)
@click.option("-m", "m", type=int, default=None)
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@click.option("--breakdown", type=click.Path(dir_okay=False),
              help="Also write the per-node score breakdown CSV.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@with_common
def dispersion(instance, checkpoint, tau, steps, dar, k, m, normalize, breakdown, output,
               seed, threads):
    """Count feasible candidates whose clipped score exceeds tau."""
    _setup(threads, seed)
    inst = _read(instance)
    params, cfg = _policy(checkpoint, dar, k, normalize)
    stats, trace = dispersion_profile(inst, params, cfg, tau, steps, m)
    Path(output).write_text(stats_to_csv(stats))
    if breakdown:
        Path(breakdown).write_text(export_breakdowns(trace, step_offset=1))


@cli.command()
@click.argument("instance_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--k-list", default="20,50,100", show_default=True)
@click.option("--registry", type=click.Path(exists=True, dir_okay=False))
@click.option("-m", "m", type=int, default=None)
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
@with_common
def ablate(instance_dir, checkpoint, k_list, registry, m, normalize, output, seed, threads):
    """Mean gap for each neighbour count K (inference-time only)."""
    _setup(threads, seed)
    try:
        ks = [int(v) for v in k_list.split(",") if v.strip()]
    except ValueError:
        raise click.UsageError(f"bad --k-list {k_list!r}") from None
    params, cfg = _policy(checkpoint, True, ks[0], normalize)
    rows = ablate_k(_instances(Path(instance_dir)), params, cfg, ks, BksRegistry.load(registry), m)
    text = "K,mean_gap\n" + "".join(f"{k},{g:.4f}\n" for k, g in rows)
    if output:
        Path(output).write_text(text)
    else:
        click.echo(text, nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="darvrp", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        return EXIT_USAGE
    except (VrplibError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last-resort guard
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
