"""Numeric kernel: float64 tensor ops, parameter store, Adam and checkpoints.

Reverse-mode differentiation is delegated to torch autograd; every tensor
built here is float64. The forward pass records the graph and
:func:`backward` walks it once, accumulating into the parameter gradients.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"DARCKPT\\0"
    version    uint32   (FORMAT_VERSION)
    step       uint64   optimizer step counter
    meta_len   uint32, meta  JSON object (sorted keys, utf-8), e.g. model dims
    count      uint32   number of entries
    per entry, in insertion order:
        name_len uint32, name utf-8 bytes
        ndim     uint32, dims uint64 * ndim
        payload  float64 * prod(dims), row-major
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .instance import ContractViolation

DTYPE = torch.float64
Tensor = torch.Tensor
FORMAT_VERSION = 1
_MAGIC = b"DARCKPT\0"

DEBUG = False


class ConfigurationError(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks after every public op."""
    global DEBUG
    DEBUG = flag


def _finite(t: Tensor, op: str) -> Tensor:
    if DEBUG and not torch.isfinite(t).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return t


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE,
                        requires_grad=requires_grad)


class ParamStore:
    """Named float64 parameters, their gradients and the Adam state."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.step = 0
        self.meta: dict = {}
        self._optim: Optional[torch.optim.Adam] = None

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"parameter {name} already exists")
        p = torch.as_tensor(value, dtype=DTYPE).detach().clone().requires_grad_(True)
        self._params[name] = p
        self._optim = None
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def grad(self, name: str) -> Tensor:
        p = self._params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float((p.grad ** 2).sum())
        return math.sqrt(total)

    def num_values(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self._params.items():
            other.add(name, p.detach())
        other.step = self.step
        other.meta = dict(self.meta)
        return other

    def optimizer(self, lr: float, betas, eps: float) -> torch.optim.Adam:
        if self._optim is None:
            self._optim = torch.optim.Adam(self.parameters(), lr=lr, betas=betas, eps=eps)
        for group in self._optim.param_groups:
            group.update(lr=lr, betas=tuple(betas), eps=eps)
        return self._optim

    def allclose(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self[n], other[n]) for n in self.names())


def linear(x: Tensor, W: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ContractViolation(
            f"linear: input width {x.shape[-1]} does not match weight height {W.shape[0]}")
    if bias is not None and bias.shape[-1] != W.shape[1]:
        raise ContractViolation(f"linear: bias width {bias.shape[-1]} != {W.shape[1]}")
    out = x @ W
    if bias is not None:
        out = out + bias
    return _finite(out, "linear")


def softmax(x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Row softmax over the last axis; ``mask`` marks the entries that are allowed."""
    if mask is not None:
        if not mask.any(-1).all():
            raise ContractViolation("softmax: a row has every entry masked")
        x = x.masked_fill(~mask, float("-inf"))
    return _finite(torch.softmax(x, dim=-1), "softmax")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d // heads), contiguous."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model width {d} not divisible by {heads} heads")
    return x.unflatten(-1, (heads, d // heads)).transpose(-3, -2).contiguous()


def attend(qh: Tensor, kh_t: Tensor, vh: Tensor, mask: Optional[Tensor] = None,
           check: bool = True) -> Tensor:
    """Per-head scaled dot-product attention with heads merged back.

    qh: (..., H, Lq, dh), kh_t: (..., H, dh, Lk) (keys pre-transposed),
    vh: (..., H, Lk, dh). ``mask`` broadcasts to (..., Lq, Lk). Callers that
    already guarantee an allowed key per query may pass ``check=False``.
    """
    scores = (qh / math.sqrt(qh.shape[-1])) @ kh_t
    if mask is not None:
        if check and not mask.any(-1).all():
            raise ContractViolation("multi_head_attention: a query has every key masked")
        scores.masked_fill_(~mask.unsqueeze(-3), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return (weights @ vh).transpose(-3, -2).flatten(-2)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: Optional[Tensor] = None, Wo: Optional[Tensor] = None,
                         bo: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention on already projected q/k/v.

    q: (..., Lq, d), k and v: (..., Lk, d). ``mask`` broadcasts to
    (..., Lq, Lk) with True for keys that may be attended. The heads are
    concatenated and, if ``Wo`` is given, projected.
    """
    if k.shape[-1] != q.shape[-1] or v.shape[-1] != q.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ContractViolation("multi_head_attention: q/k/v shapes disagree")
    qh = split_heads(q, heads)
    out = attend(qh, split_heads(k, heads).transpose(-1, -2), split_heads(v, heads), mask)
    if Wo is not None:
        out = linear(out, Wo, bo)
    return _finite(out, "multi_head_attention")


def instance_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each feature over the node axis (-2) of every instance."""
    mean = x.mean(dim=-2, keepdim=True)
    var = x.var(dim=-2, unbiased=False, keepdim=True)
    return _finite((x - mean) / torch.sqrt(var + eps) * weight + bias, "instance_norm")


def backward(loss: Tensor, store: ParamStore) -> None:
    """Accumulate d(loss)/d(param) into every parameter gradient of ``store``."""
    if loss.numel() != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise ContractViolation("backward: loss was not computed from recorded parameters")
    loss.reshape(()).backward()


def adam_step(store: ParamStore, lr: float = 1e-4, betas=(0.9, 0.999),
              eps: float = 1e-8) -> ParamStore:
    store.optimizer(lr, betas, eps).step()
    store.step += 1
    store.zero_grad()
    return store


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central finite differences of scalar ``f()`` w.r.t. the entries of ``x``.

    ``x`` is perturbed in place (under no_grad) and restored afterwards.
    """
    grad = torch.zeros_like(x, dtype=DTYPE)
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f())
            flat[i] = orig - eps
            lo = float(f())
            flat[i] = orig
            grad.view(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def save_checkpoint(store: ParamStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


def checkpoint_bytes(store: ParamStore) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    meta = json.dumps(store.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<IQI", FORMAT_VERSION, store.step, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(store)))
    for name, p in store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.dim()))
        buf.write(struct.pack(f"<{p.dim()}Q", *p.shape))
        buf.write(p.detach().numpy().astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def load_checkpoint(path) -> ParamStore:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> ParamStore:
    view = memoryview(data)
    if bytes(view[:8]) != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, step, meta_len = take("<IQI")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        store.add(name, torch.from_numpy(arr.astype(np.float64)))
    store.step = step
    store.meta = meta
    return store


def init_uniform(store: ParamStore, name: str, shape: Iterable[int], fan_in: int,
                 gen: torch.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    value = (torch.rand(tuple(shape), generator=gen, dtype=DTYPE) * 2 - 1) * bound
    return store.add(name, value)
