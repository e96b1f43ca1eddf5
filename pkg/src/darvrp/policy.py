"""Attention encoder/decoder construction policy with distance-aware reshaping.

The network follows the POMO layout: a stack of attention encoder layers
produces node embeddings, and the decoder turns a context (graph mean,
current node, remaining capacity) into a query that goes through one
multi-head glimpse and a single-head compatibility against the embeddings.

Distance-aware attention reshaping (DAR) adds a parameter-free distance
score to those compatibilities before the tanh clip:

    b[j] = -log(d[i, j])   if j is one of the K nodes closest to i
    b[j] = -d[i, j]        otherwise
    alpha[j] = C * tanh(a[j] + b[j])      (masked to -inf when infeasible)

Distances for the score are taken on unit-square normalized coordinates.
Everything is batched as (instances B, trajectories M, nodes N+1).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from . import kernel as K
from .instance import (DISTANCE_MATRIX_CAP, ContractViolation, Instance, Solution,
                       normalize_to_unit_square, solution_cost)
from .kernel import ParamStore, Tensor

NEG_INF = float("-inf")


@dataclass(frozen=True)
class PolicyConfig:
    K: int = 100
    C: float = 50.0
    dar_enabled: bool = True
    normalize_inputs: bool = True
    embedding_dim: int = 64
    heads: int = 4
    encoder_layers: int = 3
    ff_hidden: int = 128
    min_distance: float = 1e-10
    # Diagnostics: replace the learned compatibilities by zeros.
    zero_attention: bool = False
    matrix_cap: int = DISTANCE_MATRIX_CAP

    def __post_init__(self):
        if self.K < 1:
            raise ContractViolation(f"K must be >= 1, got {self.K}")
        if not self.C > 0:
            raise ContractViolation(f"C must be positive, got {self.C}")
        if self.embedding_dim % self.heads:
            raise K.ConfigurationError(
                f"embedding_dim {self.embedding_dim} not divisible by heads {self.heads}")

    def with_(self, **kw) -> "PolicyConfig":
        return replace(self, **kw)


POMO_CONFIG = PolicyConfig(embedding_dim=128, heads=8, encoder_layers=6, ff_hidden=512)


def init_params(cfg: PolicyConfig, seed: int = 0) -> ParamStore:
    gen = torch.Generator().manual_seed(seed)
    d, ff = cfg.embedding_dim, cfg.ff_hidden
    store = ParamStore()

    def lin(name, fan_in, fan_out, bias=True):
        K.init_uniform(store, f"{name}.W", (fan_in, fan_out), fan_in, gen)
        if bias:
            K.init_uniform(store, f"{name}.b", (fan_out,), fan_in, gen)

    lin("enc.depot", 2, d)
    lin("enc.node", 3, d)
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        for w in ("Wq", "Wk", "Wv"):
            lin(f"{p}.{w}", d, d, bias=False)
        lin(f"{p}.Wo", d, d)
        store.add(f"{p}.norm1.w", torch.ones(d))
        store.add(f"{p}.norm1.b", torch.zeros(d))
        lin(f"{p}.ff1", d, ff)
        lin(f"{p}.ff2", ff, d)
        store.add(f"{p}.norm2.w", torch.ones(d))
        store.add(f"{p}.norm2.b", torch.zeros(d))
    lin("dec.ctx", 2 * d + 1, d, bias=False)
    lin("dec.Wk", d, d, bias=False)
    lin("dec.Wv", d, d, bias=False)
    lin("dec.Wo", d, d)
    store.meta = {"embedding_dim": d, "heads": cfg.heads, "encoder_layers": cfg.encoder_layers,
                  "ff_hidden": ff}
    return store


def config_from_params(params: ParamStore, **overrides) -> PolicyConfig:
    """Policy config whose model dims match a (loaded) parameter store."""
    dims = {k: params.meta[k] for k in ("embedding_dim", "heads", "encoder_layers", "ff_hidden")
            if k in params.meta}
    dims.update(overrides)
    return PolicyConfig(**dims)


# ---------------------------------------------------------------------------
# Batched instance data


@dataclass
class InstanceBatch:
    """Same-size instances stacked as tensors."""

    instances: list[Instance]
    coords: Tensor        # (B, N1, 2) original coordinates
    coords01: Tensor      # (B, N1, 2) unit-square coordinates
    demands: Tensor       # (B, N1)
    capacity: Tensor      # (B,)
    score_table: Optional[Tensor] = None  # (B, N1, N1) distance scores

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[1]


def make_batch(instances: Sequence[Instance], cfg: PolicyConfig) -> InstanceBatch:
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ContractViolation("instances in one batch must have the same customer count")
    coords = torch.from_numpy(np.stack([inst.coords for inst in instances]))
    if cfg.normalize_inputs:
        c01 = np.stack([normalize_to_unit_square(inst).coords01 for inst in instances])
        coords01 = torch.from_numpy(c01)
    else:
        coords01 = coords.clone()
    demands = torch.from_numpy(np.stack([inst.demands for inst in instances]))
    capacity = torch.tensor([float(inst.capacity) for inst in instances], dtype=K.DTYPE)
    batch = InstanceBatch(list(instances), coords, coords01, demands, capacity)
    if cfg.dar_enabled and n + 1 <= cfg.matrix_cap:
        batch.score_table = distance_score_table(coords01, cfg.K, cfg.min_distance)
    return batch


def _pairwise(a: Tensor, b: Tensor) -> Tensor:
    return torch.sqrt(((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1))


def _topk_membership(dist: Tensor, self_idx: Tensor, k: int) -> Tensor:
    """Boolean mask of the k nearest nodes per row, self excluded, ties to lower index."""
    d = dist.scatter(-1, self_idx.unsqueeze(-1), float("inf"))
    kk = min(k, d.shape[-1] - 1)
    order = torch.sort(d, dim=-1, stable=True).indices[..., :kk]
    return torch.zeros_like(d, dtype=torch.bool).scatter(-1, order, True)


def _scores_from(dist: Tensor, member: Tensor, self_idx: Tensor, min_d: float) -> Tensor:
    b = torch.where(member, -torch.log(dist.clamp_min(min_d)), -dist)
    self_score = torch.full_like(self_idx, -math.log(min_d), dtype=dist.dtype).unsqueeze(-1)
    return b.scatter(-1, self_idx.unsqueeze(-1), self_score)


def distance_score_table(coords01: Tensor, k: int, min_d: float = 1e-10) -> Tensor:
    """All rows of the distance score, (B, N1, N1)."""
    dist = _pairwise(coords01, coords01)
    n1 = dist.shape[-1]
    idx = torch.arange(n1).expand(dist.shape[:-1])
    member = _topk_membership(dist, idx, k)
    return _scores_from(dist, member, idx, min_d)


def _score_rows(batch: InstanceBatch, current: Tensor, cfg: PolicyConfig) -> Tensor:
    """Distance scores of the current nodes, (B, M, N1)."""
    if batch.score_table is not None:
        n1 = batch.n_nodes
        return batch.score_table.gather(1, current.unsqueeze(-1).expand(-1, -1, n1))
    here = batch.coords01.gather(1, current.unsqueeze(-1).expand(-1, -1, 2))
    dist = torch.sqrt(((here.unsqueeze(-2) - batch.coords01.unsqueeze(1)) ** 2).sum(-1))
    member = _topk_membership(dist, current, cfg.K)
    return _scores_from(dist, member, current, cfg.min_distance)


# ---------------------------------------------------------------------------
# Encoder


def encode_batch(params: ParamStore, cfg: PolicyConfig, batch: InstanceBatch) -> Tensor:
    xy = batch.coords01
    frac = (batch.demands / batch.capacity.unsqueeze(-1)).unsqueeze(-1)
    depot = K.linear(xy[:, :1], params["enc.depot.W"], params["enc.depot.b"])
    nodes = K.linear(torch.cat([xy[:, 1:], frac[:, 1:]], dim=-1),
                     params["enc.node.W"], params["enc.node.b"])
    h = torch.cat([depot, nodes], dim=1)
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        q = K.linear(h, params[f"{p}.Wq.W"])
        k = K.linear(h, params[f"{p}.Wk.W"])
        v = K.linear(h, params[f"{p}.Wv.W"])
        att = K.multi_head_attention(q, k, v, cfg.heads, Wo=params[f"{p}.Wo.W"],
                                     bo=params[f"{p}.Wo.b"])
        h = K.instance_norm(h + att, params[f"{p}.norm1.w"], params[f"{p}.norm1.b"])
        ff = K.linear(torch.relu(K.linear(h, params[f"{p}.ff1.W"], params[f"{p}.ff1.b"])),
                      params[f"{p}.ff2.W"], params[f"{p}.ff2.b"])
        h = K.instance_norm(h + ff, params[f"{p}.norm2.w"], params[f"{p}.norm2.b"])
    return h


@dataclass
class NodeEmbedding:
    h: Tensor  # (n+1, d)

    @property
    def shape(self):
        return tuple(self.h.shape)


def encode(inst: Instance, params: ParamStore, cfg: PolicyConfig) -> NodeEmbedding:
    return NodeEmbedding(encode_batch(params, cfg, make_batch([inst], cfg))[0])


# ---------------------------------------------------------------------------
# Decoder pieces (shared by the batched engine and the single-step API)


@dataclass
class DecoderCache:
    """Per-instance decoder projections computed once per rollout."""

    h: Tensor          # (B, N1, d)
    h_t: Tensor        # (B, d, N1) embeddings as compatibility keys
    mean_proj: Tensor  # (B, 1, d) graph-mean part of the context projection
    node_proj: Tensor  # (B, N1, d) current-node part of the context projection
    cap_proj: Tensor   # (d,) remaining-capacity row of the context projection
    glimpse_k: Tensor  # (B, H, dh, N1)
    glimpse_v: Tensor  # (B, H, N1, dh)


def decoder_cache(params: ParamStore, cfg: PolicyConfig, h: Tensor) -> DecoderCache:
    d = h.shape[-1]
    W = params["dec.ctx.W"]
    mean = h.mean(dim=1, keepdim=True)
    return DecoderCache(
        h, h.transpose(1, 2).contiguous(), K.linear(mean, W[:d]), K.linear(h, W[d:2 * d]), W[2 * d],
        K.split_heads(K.linear(h, params["dec.Wk.W"]), cfg.heads).transpose(-1, -2).contiguous(),
        K.split_heads(K.linear(h, params["dec.Wv.W"]), cfg.heads))


def _context(cache: DecoderCache, current: Tensor, remaining_frac: Tensor) -> Tensor:
    """Projection of [graph mean ++ current node ++ remaining/Q], shape (B, M, d)."""
    d = cache.h.shape[-1]
    here = cache.node_proj.gather(1, current.unsqueeze(-1).expand(-1, -1, d))
    return cache.mean_proj + here + remaining_frac.unsqueeze(-1) * cache.cap_proj


def _query(params, cfg, cache: DecoderCache, ctx: Tensor, feasible: Tensor) -> Tensor:
    glimpse = K.attend(K.split_heads(ctx, cfg.heads), cache.glimpse_k, cache.glimpse_v, feasible,
                       check=False)
    return K.linear(glimpse, params["dec.Wo.W"], params["dec.Wo.b"])


def _compat(query: Tensor, h_t: Tensor) -> Tensor:
    return (query / math.sqrt(h_t.shape[-2])) @ h_t


def reshape_scores(a: Tensor, b: Optional[Tensor], dar_enabled: bool = True) -> Tensor:
    if b is None or not dar_enabled:
        return a
    if a.shape != b.shape:
        raise ContractViolation(f"reshape_scores: shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b


def clip_scores(reshaped: Tensor, feasible: Tensor, C: float) -> Tensor:
    if not feasible.any(-1).all():
        raise ContractViolation("no feasible action")
    return (C * torch.tanh(reshaped)).masked_fill_(~feasible, NEG_INF)


def base_policy_probs(a: Tensor, feasible: Tensor, C: float) -> Tensor:
    """Probabilities of the policy without reshaping: softmax(C*tanh(a)) over feasible nodes."""
    alpha = (C * torch.tanh(a)).masked_fill(~feasible, NEG_INF)
    return K.softmax(alpha, feasible)


@dataclass
class StepScores:
    attention: Tensor
    distance: Optional[Tensor]
    reshaped: Tensor
    clipped: Tensor
    probs: Tensor


def step_scores(params, cfg, batch: InstanceBatch, cache: DecoderCache, current: Tensor,
                remaining: Tensor, feasible: Tensor) -> StepScores:
    ctx = _context(cache, current, remaining / batch.capacity.unsqueeze(-1))
    if cfg.zero_attention:
        a = torch.zeros(feasible.shape, dtype=K.DTYPE)
    else:
        a = _compat(_query(params, cfg, cache, ctx, feasible), cache.h_t)
    b = _score_rows(batch, current, cfg) if cfg.dar_enabled else None
    reshaped = reshape_scores(a, b, cfg.dar_enabled)
    clipped = clip_scores(reshaped, feasible, cfg.C)
    # Infeasible entries are already -inf, so no second mask is needed.
    return StepScores(a, b, reshaped, clipped, K.softmax(clipped))


# ---------------------------------------------------------------------------
# Rollout engine


@dataclass
class BatchState:
    current: Tensor     # (B, M) long
    remaining: Tensor   # (B, M)
    visited: Tensor     # (B, M, N1) bool, depot column always False
    capacity: Tensor    # (B, 1)
    demands: Tensor     # (B, 1, N1)

    @classmethod
    def start(cls, batch: InstanceBatch, m: int) -> "BatchState":
        b, n1 = batch.size, batch.n_nodes
        cap = batch.capacity.unsqueeze(-1)
        return cls(torch.zeros(b, m, dtype=torch.long), cap.expand(b, m).clone(),
                   torch.zeros(b, m, n1, dtype=torch.bool), cap, batch.demands.unsqueeze(1))

    def all_served(self) -> Tensor:
        return self.visited[..., 1:].all(-1)

    def done(self) -> Tensor:
        return self.all_served() & (self.current == 0)

    def feasible(self) -> Tensor:
        fits = self.demands <= self.remaining.unsqueeze(-1)
        ok = ~self.visited & fits
        ok[..., 0] = (self.current != 0) | self.all_served()
        return ok

    def apply(self, action: Tensor) -> None:
        served = self.demands.expand(-1, action.shape[1], -1).gather(
            -1, action.unsqueeze(-1)).squeeze(-1)
        at_depot = action == 0
        self.remaining = torch.where(at_depot, self.capacity.expand_as(self.remaining),
                                     self.remaining - served)
        self.visited.scatter_(-1, action.unsqueeze(-1), True)
        self.visited[..., 0] = False
        self.current = action


@dataclass
class RolloutResult:
    actions: Tensor       # (B, M, T) node sequence after leaving the depot
    costs: Tensor         # (B, M) tour lengths on original coordinates
    log_probs: Tensor     # (B, M) sum of log-probabilities of chosen actions
    trace: list = field(default_factory=list)

    def routes(self, b: int, m: int) -> list[list[int]]:
        return actions_to_routes(self.actions[b, m].tolist())


def actions_to_routes(actions: Sequence[int]) -> list[list[int]]:
    routes, cur = [], []
    for a in actions:
        if a == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(int(a))
    if cur:
        routes.append(cur)
    return routes


def _tour_costs(coords: Tensor, actions: Tensor) -> Tensor:
    b, m, t = actions.shape
    seq = torch.cat([torch.zeros(b, m, 1, dtype=torch.long), actions,
                     torch.zeros(b, m, 1, dtype=torch.long)], dim=-1)
    xy = coords.unsqueeze(1).expand(b, m, -1, 2).gather(2, seq.unsqueeze(-1).expand(-1, -1, -1, 2))
    return torch.sqrt(((xy[:, :, 1:] - xy[:, :, :-1]) ** 2).sum(-1)).sum(-1)


def start_nodes(n: int, m: int) -> list[int]:
    if not 1 <= m <= n:
        raise ContractViolation(f"trajectory count m={m} must lie in 1..{n}")
    return list(range(1, m + 1))


def rollout(params: ParamStore, cfg: PolicyConfig, batch: InstanceBatch, m: int,
            mode: str = "greedy", generator: Optional[torch.Generator] = None,
            trace_steps: int = 0, h: Optional[Tensor] = None) -> RolloutResult:
    """Run m multi-start trajectories on every instance of ``batch``.

    The first move from the depot is forced to a distinct customer per
    trajectory. ``mode`` is "greedy" (argmax) or "sample". When
    ``trace_steps`` > 0 the score breakdown of the first policy decisions
    is kept in ``result.trace``.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    n1 = batch.n_nodes
    bsz = batch.size
    if h is None:
        h = encode_batch(params, cfg, batch)
    cache = decoder_cache(params, cfg, h)
    state = BatchState.start(batch, m)
    first = torch.tensor(start_nodes(n1 - 1, m), dtype=torch.long).expand(bsz, m)
    state.apply(first)
    actions = [first]
    log_probs = torch.zeros(bsz, m, dtype=K.DTYPE)
    trace = []
    step = 0
    while not bool(state.done().all()):
        feasible = state.feasible()
        scores = step_scores(params, cfg, batch, cache, state.current, state.remaining, feasible)
        probs = scores.probs
        if step < trace_steps:
            trace.append({"current": state.current.clone(), "feasible": feasible,
                          "attention": scores.attention.detach(),
                          "distance": None if scores.distance is None else scores.distance.detach(),
                          "reshaped": scores.reshaped.detach(),
                          "clipped": scores.clipped.detach(), "probs": probs.detach()})
        if mode == "greedy":
            action = probs.argmax(-1)
        else:
            flat = probs.detach().reshape(-1, n1)
            action = torch.multinomial(flat, 1, generator=generator).view(bsz, m)
        chosen = probs.gather(-1, action.unsqueeze(-1)).squeeze(-1)
        log_probs = log_probs + torch.log(chosen)
        state.apply(action)
        actions.append(action)
        step += 1
    acts = torch.stack(actions, dim=-1)
    # Trailing depot moves of finished trajectories carry probability one.
    return RolloutResult(acts, _tour_costs(batch.coords, acts), log_probs, trace)


# ---------------------------------------------------------------------------
# Single-instance API


@dataclass
class RolloutState:
    """State of one trajectory while it is being decoded."""

    demands: np.ndarray
    capacity: float
    visited: np.ndarray
    current: int = 0
    remaining: float = 0.0
    log_prob_sum: float = 0.0
    route_so_far: list = field(default_factory=lambda: [[]])

    @classmethod
    def start(cls, inst: Instance) -> "RolloutState":
        return cls(inst.demands, float(inst.capacity), np.zeros(inst.n + 1, dtype=bool),
                   0, float(inst.capacity))

    def feasible(self) -> np.ndarray:
        ok = ~self.visited & (self.demands <= self.remaining)
        ok[0] = self.current != 0 or bool(self.visited[1:].all())
        return ok

    def move(self, node: int, prob: float = 1.0) -> None:
        node = int(node)
        if node == 0:
            self.remaining = self.capacity
            if self.route_so_far[-1]:
                self.route_so_far.append([])
        else:
            if self.visited[node]:
                raise ContractViolation(f"customer {node} already visited")
            self.visited[node] = True
            self.remaining -= self.demands[node]
            self.route_so_far[-1].append(node)
        self.log_prob_sum += math.log(prob)
        self.current = node

    def solution(self, inst: Instance) -> Solution:
        routes = [list(r) for r in self.route_so_far if r]
        return Solution(routes, solution_cost(inst, routes))


@dataclass
class DecoderContext:
    h_t: Tensor          # projected context, (d,)
    s_t: int             # previous action
    m: int               # trajectory count
    feasible: np.ndarray


@dataclass
class ScoreBreakdown:
    attention: np.ndarray
    distance_scores: np.ndarray
    reshaped: np.ndarray
    clipped: np.ndarray
    probs: np.ndarray
    current: int = 0
    feasible: Optional[np.ndarray] = None


def _state_tensors(state: RolloutState):
    current = torch.tensor([[state.current]], dtype=torch.long)
    remaining = torch.tensor([[state.remaining]], dtype=K.DTYPE)
    feasible = torch.from_numpy(state.feasible()).view(1, 1, -1)
    return current, remaining, feasible


def decoder_context(inst: Instance, emb: NodeEmbedding, state: RolloutState,
                    params: ParamStore, cfg: PolicyConfig, m: int = 1) -> DecoderContext:
    cache = decoder_cache(params, cfg, emb.h.unsqueeze(0))
    current, remaining, _ = _state_tensors(state)
    ctx = _context(cache, current, remaining / float(inst.capacity))
    return DecoderContext(ctx[0, 0], state.current, m, state.feasible())


def attention_scores(ctx: DecoderContext, emb: NodeEmbedding, params: ParamStore,
                     cfg: PolicyConfig) -> Tensor:
    cache = decoder_cache(params, cfg, emb.h.unsqueeze(0))
    feasible = torch.from_numpy(ctx.feasible).view(1, 1, -1)
    q = _query(params, cfg, cache, ctx.h_t.view(1, 1, -1), feasible)
    return _compat(q, cache.h_t)[0, 0]


def distance_scores(inst: Instance, i: int, K_: int, normalize: bool = True,
                    min_distance: float = 1e-10) -> np.ndarray:
    """Distance score row of node ``i`` (length n+1)."""
    if not 0 <= i <= inst.n:
        raise ContractViolation(f"node index {i} out of range 0..{inst.n}")
    xy = normalize_to_unit_square(inst).coords01 if normalize else inst.coords
    c = torch.tensor(xy, dtype=K.DTYPE).unsqueeze(0)
    dist = torch.sqrt(((c[:, i:i + 1].unsqueeze(-2) - c.unsqueeze(1)) ** 2).sum(-1))
    idx = torch.tensor([[i]])
    member = _topk_membership(dist, idx, K_)
    return _scores_from(dist, member, idx, min_distance)[0, 0].numpy()


def clip_and_mask(reshaped, state: RolloutState, C: float) -> np.ndarray:
    feasible = torch.from_numpy(state.feasible())
    return clip_scores(torch.as_tensor(reshaped, dtype=K.DTYPE), feasible, C).detach().numpy()


def step_policy(inst: Instance, emb: NodeEmbedding, state: RolloutState, cfg: PolicyConfig,
                params: ParamStore, batch: Optional[InstanceBatch] = None):
    """Probabilities of the next node for one trajectory, with the score breakdown."""
    batch = batch or make_batch([inst], cfg)
    cache = decoder_cache(params, cfg, emb.h.unsqueeze(0))
    current, remaining, feasible = _state_tensors(state)
    s = step_scores(params, cfg, batch, cache, current, remaining, feasible)
    zeros = torch.zeros_like(s.attention)
    bd = ScoreBreakdown(
        s.attention[0, 0].detach().numpy(),
        (s.distance if s.distance is not None else zeros)[0, 0].detach().numpy(),
        s.reshaped[0, 0].detach().numpy(), s.clipped[0, 0].detach().numpy(),
        s.probs[0, 0].detach().numpy(), state.current, feasible[0, 0].numpy())
    return s.probs[0, 0], bd


def _breakdowns(trace: list, b: int, m: int) -> list[ScoreBreakdown]:
    out = []
    for rec in trace:
        dist = rec["distance"]
        out.append(ScoreBreakdown(
            rec["attention"][b, m].numpy(),
            np.zeros(rec["attention"].shape[-1]) if dist is None else dist[b, m].numpy(),
            rec["reshaped"][b, m].numpy(), rec["clipped"][b, m].numpy(),
            rec["probs"][b, m].numpy(), int(rec["current"][b, m]), rec["feasible"][b, m].numpy()))
    return out


def best_solutions(result: RolloutResult, batch: InstanceBatch) -> list[Solution]:
    sols = []
    best = result.costs.argmin(dim=1)
    for b, inst in enumerate(batch.instances):
        routes = result.routes(b, int(best[b]))
        sols.append(Solution(routes, solution_cost(inst, routes)))
    return sols


def greedy_rollout(inst: Instance, params: ParamStore, cfg: PolicyConfig,
                   m: Optional[int] = None, trace_steps: int = 0):
    """Multi-start greedy decoding; returns the cheapest trajectory and its trace."""
    m = inst.n if m is None else min(m, inst.n)
    batch = make_batch([inst], cfg)
    with torch.no_grad():
        res = rollout(params, cfg, batch, m, "greedy", trace_steps=trace_steps)
    best = int(res.costs[0].argmin())
    routes = res.routes(0, best)
    return Solution(routes, solution_cost(inst, routes)), _breakdowns(res.trace, 0, best)


def greedy_solve_many(instances: Sequence[Instance], params: ParamStore, cfg: PolicyConfig,
                      m: Optional[int] = None, chunk: int = 16) -> list[Solution]:
    """Greedy decoding of many instances, batching those of equal size."""
    out: dict[int, Solution] = {}
    by_n: dict[int, list[int]] = {}
    for idx, inst in enumerate(instances):
        by_n.setdefault(inst.n, []).append(idx)
    with torch.no_grad():
        for n, idxs in by_n.items():
            mm = n if m is None else min(m, n)
            for lo in range(0, len(idxs), chunk):
                part = idxs[lo:lo + chunk]
                batch = make_batch([instances[i] for i in part], cfg)
                res = rollout(params, cfg, batch, mm, "greedy")
                for i, sol in zip(part, best_solutions(res, batch)):
                    out[i] = sol
    return [out[i] for i in range(len(instances))]


def sample_rollout(inst: Instance, params: ParamStore, cfg: PolicyConfig, m: int,
                   rng_seed: int):
    """Sample m trajectories; log-probabilities stay on the autodiff graph."""
    batch = make_batch([inst], cfg)
    gen = torch.Generator().manual_seed(rng_seed)
    res = rollout(params, cfg, batch, min(m, inst.n), "sample", generator=gen)
    sols = []
    for j in range(res.actions.shape[1]):
        routes = res.routes(0, j)
        sols.append(Solution(routes, solution_cost(inst, routes)))
    return sols, res.log_probs[0]


def export_breakdowns(records: Sequence[ScoreBreakdown], step_offset: int = 0) -> str:
    """Score breakdowns as CSV: one row per (step, node)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "current", "node", "feasible", "attention", "distance_score",
                "reshaped", "clipped", "prob"])
    for s, bd in enumerate(records, start=step_offset):
        feas = bd.feasible if bd.feasible is not None else np.isfinite(bd.clipped)
        for j in range(len(bd.attention)):
            w.writerow([s, bd.current, j, int(bool(feas[j])), repr(float(bd.attention[j])),
                        repr(float(bd.distance_scores[j])), repr(float(bd.reshaped[j])),
                        repr(float(bd.clipped[j])), repr(float(bd.probs[j]))])
    return buf.getvalue()


def parse_breakdowns(text: str) -> list[ScoreBreakdown]:
    rows = list(csv.DictReader(io.StringIO(text)))
    by_step: dict[int, list] = {}
    for r in rows:
        by_step.setdefault(int(r["step"]), []).append(r)
    out = []
    for s in sorted(by_step):
        rs = sorted(by_step[s], key=lambda r: int(r["node"]))
        col = lambda k: np.array([float(r[k]) for r in rs])
        out.append(ScoreBreakdown(col("attention"), col("distance_score"), col("reshaped"),
                                  col("clipped"), col("prob"), int(rs[0]["current"]),
                                  np.array([r["feasible"] == "1" for r in rs])))
    return out
