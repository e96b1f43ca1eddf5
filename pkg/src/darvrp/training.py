"""REINFORCE training with the POMO shared baseline.

Each step draws an instance size (fixed, or uniform over a range for the
varying-scale phase), generates ``batch_size_for(N)`` random instances,
samples m multi-start trajectories per instance and takes one Adam step on

    loss = -(1/M) * sum_m (R_m - mean(R)) * log p(trajectory_m)

averaged over the instances of the batch. The baseline mean(R) is a
constant: no gradient flows through it.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import kernel as K
from .instance import ContractViolation, Instance, Solution, check_feasible, solution_cost
from .kernel import ParamStore, Tensor
from .policy import PolicyConfig, init_params, make_batch, rollout
from .vrplib import default_capacity, generate_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_low: int = 20
    n_high: Optional[int] = None   # set for varying-scale training, N ~ U(n_low, n_high)
    steps: int = 2000
    base_batch: int = 120
    batch_cap: Optional[int] = 64  # desk-scale ceiling on batch_size_for
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m: Optional[int] = None        # trajectories per instance, default N
    seed: int = 1234
    early_stop_steps: Optional[int] = None
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    capacity: Optional[float] = None
    demand_low: int = 1
    demand_high: int = 9
    # policy
    K: int = 100
    C: float = 50.0
    dar_enabled: bool = True
    normalize_inputs: bool = True
    embedding_dim: int = 64
    heads: int = 4
    encoder_layers: int = 3
    ff_hidden: int = 128

    def __post_init__(self):
        if self.steps < 0:
            raise ContractViolation("steps must be >= 0")
        if self.n_low < 1 or (self.n_high is not None and self.n_high < self.n_low):
            raise ContractViolation(f"bad size schedule {self.n_low}..{self.n_high}")

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(K=self.K, C=self.C, dar_enabled=self.dar_enabled,
                            normalize_inputs=self.normalize_inputs,
                            embedding_dim=self.embedding_dim, heads=self.heads,
                            encoder_layers=self.encoder_layers, ff_hidden=self.ff_hidden)

    def total_steps(self) -> int:
        if self.early_stop_steps is None:
            return self.steps
        return min(self.steps, self.early_stop_steps)


def load_config(path: Union[str, Path], **overrides) -> TrainConfig:
    """Read a ``key = value`` file (``#`` comments) into a :class:`TrainConfig`."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in types:
            raise ValueError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
        values[key] = _coerce(value, types[key])
    values.update(overrides)
    return TrainConfig(**values)


def _coerce(value: str, typ: str):
    if value.lower() in ("none", ""):
        return None
    if "bool" in typ:
        if value.lower() in ("true", "1", "yes", "on"):
            return True
        if value.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value


def batch_size_for(n: int, base: int = 120) -> int:
    if n < 1:
        raise ContractViolation(f"instance size must be >= 1, got {n}")
    return max(1, math.floor(base * (100 / n) ** 1.6))


def reward(inst: Instance, sol: Solution) -> float:
    verdict = check_feasible(inst, sol)
    if not verdict.ok:
        raise ContractViolation("reward of infeasible solution: " + "; ".join(verdict.violations))
    return -solution_cost(inst, sol)


def reinforce_loss(rewards: Tensor, log_probs: Tensor) -> Tensor:
    """Shared-baseline REINFORCE loss; rows of a 2-D input are separate instances."""
    rewards = torch.as_tensor(rewards, dtype=K.DTYPE).detach()
    if rewards.shape[-1] < 2:
        raise K.ConfigurationError("the shared baseline needs at least two trajectories")
    if rewards.shape != log_probs.shape:
        raise ContractViolation(
            f"rewards {tuple(rewards.shape)} vs log_probs {tuple(log_probs.shape)}")
    advantage = rewards - rewards.mean(dim=-1, keepdim=True)
    return -(advantage * log_probs).mean()


@dataclass
class StepLog:
    step: int
    n: int
    batch: int
    reward: float
    baseline: float
    loss: float
    grad_norm: float
    seconds: float


@dataclass
class TrainReport:
    rows: list[StepLog] = field(default_factory=list)
    wall_clock: float = 0.0

    HEADER = "step,n,batch,reward,baseline,loss,grad_norm,seconds"

    def to_text(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.step},{r.n},{r.batch},{r.reward!r},{r.baseline!r},{r.loss!r},"
                         f"{r.grad_norm!r},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def train(cfg: TrainConfig, store: Optional[ParamStore] = None,
          report_path: Union[str, Path, None] = None) -> tuple[ParamStore, TrainReport]:
    pcfg = cfg.policy_config()
    if store is None:
        store = init_params(pcfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    report = TrainReport()
    report_file = None
    if report_path is not None:
        report_file = open(report_path, "w")
        report_file.write(TrainReport.HEADER + "\n")
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.total_steps() + 1):
            n = cfg.n_low if cfg.n_high is None else int(rng.integers(cfg.n_low, cfg.n_high + 1))
            bs = batch_size_for(n, cfg.base_batch)
            if cfg.batch_cap is not None:
                bs = min(bs, cfg.batch_cap)
            cap = default_capacity(n) if cfg.capacity is None else cfg.capacity
            insts = generate_batch(n, bs, rng, cap, cfg.demand_low, cfg.demand_high)
            m = n if cfg.m is None else min(cfg.m, n)
            res = rollout(store, pcfg, make_batch(insts, pcfg), m, "sample", generator=gen)
            rewards = -res.costs.detach()
            loss = reinforce_loss(rewards, res.log_probs)
            if not torch.isfinite(loss):
                state = {"step": step, "n": n, "rewards": rewards.numpy().copy(),
                         "log_probs": res.log_probs.detach().numpy().copy()}
                if cfg.checkpoint_dir:
                    K.save_checkpoint(store, Path(cfg.checkpoint_dir) / "diverged.ckpt")
                raise TrainingDiverged(f"non-finite loss at step {step}", state)
            K.backward(loss, store)
            gnorm = store.grad_norm()
            K.adam_step(store, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
            row = StepLog(step, n, bs, float(rewards.mean()), float(rewards.mean(-1).mean()),
                          float(loss.detach()), gnorm, time.perf_counter() - t0)
            report.rows.append(row)
            if report_file is not None:
                report_file.write(TrainReport(rows=[row]).to_text().split("\n", 1)[1])
                report_file.flush()
            if step % 100 == 0:
                log.info("step %d n=%d reward %.4f loss %.5f", step, n, row.reward, row.loss)
            if cfg.checkpoint_every and cfg.checkpoint_dir and step % cfg.checkpoint_every == 0:
                K.save_checkpoint(store, Path(cfg.checkpoint_dir) / f"step{step:07d}.ckpt")
    finally:
        if report_file is not None:
            report_file.close()
    report.wall_clock = time.perf_counter() - t0
    return store, report
