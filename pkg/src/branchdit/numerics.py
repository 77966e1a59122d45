"""Dense numeric substrate.

Tensors are plain ``torch.Tensor`` values (double precision by default); the
autograd tape is torch's. This module adds the pieces the rest of the engine
relies on with stricter contracts than the stock ops: shape-checked matmul,
a mask-aware row softmax, RMS normalization, a named parameter store with
trainable flags and explicit gradient slots, and a central-difference
gradient checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import torch

DEFAULT_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row had no finite logit."""


def dtype_for(precision: str) -> torch.dtype:
    if precision == "f64":
        return torch.float64
    if precision == "f32":
        return torch.float32
    raise ValueError(f"unknown precision {precision!r} (expected f64 or f32)")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis treating ``-inf`` as a hard mask.

    Masked entries never reach ``exp``; they come out as exact zeros. The
    row max is taken over finite entries only.
    """
    finite = torch.isfinite(logits)
    if not bool(finite.any(dim=-1).all()):
        raise DegenerateRowError("softmax row with every logit masked")
    neg_inf = torch.full_like(logits, -math.inf)
    row_max = torch.where(finite, logits, neg_inf).amax(dim=-1, keepdim=True).detach()
    shifted = torch.where(finite, logits - row_max, torch.zeros_like(logits))
    e = torch.where(finite, torch.exp(shifted), torch.zeros_like(logits))
    return e / e.sum(dim=-1, keepdim=True)


def rmsnorm(x: torch.Tensor, weight: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    out = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if weight is not None:
        out = out * weight
    return out


@dataclass
class ParamStore:
    """Named parameters with trainable flags and gradient slots.

    Frozen parameters are stored without ``requires_grad`` so the tape never
    reaches them; their gradient slot stays identically zero.
    """

    params: dict[str, torch.Tensor] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, value: torch.Tensor, trainable: bool = True) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = value.detach().clone().requires_grad_(trainable)
        self.params[name] = value
        self.trainable[name] = trainable
        return value

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, trainable: bool | None = None) -> list[str]:
        if trainable is None:
            return list(self.params)
        return [n for n in self.params if self.trainable[n] == trainable]

    def set_trainable(self, flag: bool, names: list[str] | None = None) -> None:
        for name in names if names is not None else list(self.params):
            self.trainable[name] = flag
            self.params[name].requires_grad_(flag)

    def grad(self, name: str) -> torch.Tensor:
        p = self.params[name]
        return torch.zeros_like(p) if p.grad is None else p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def backward(self, loss: torch.Tensor) -> None:
        """Accumulate d(loss)/d(param) into every trainable slot."""
        if any(self.trainable.values()):
            loss.backward()

    def trainable_tensors(self) -> list[torch.Tensor]:
        return [self.params[n] for n in self.names(trainable=True)]

    def num_values(self, trainable: bool | None = None) -> int:
        return sum(self.params[n].numel() for n in self.names(trainable))

    def values_snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.params.items()}

    def to(self, dtype: torch.dtype) -> None:
        for n, p in self.params.items():
            self.params[n] = p.detach().to(dtype).requires_grad_(self.trainable[n])


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    tol: float
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def passed(self) -> bool:
        return not self.failures


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    Every trainable entry is checked unless ``max_entries`` caps it, in which
    case a seeded uniform subsample of that size (across all parameters) is
    used. The relative error is ``|fd - ad| / max(|fd|, |ad|, abs_floor)``.
    """
    store.zero_grad()
    loss = loss_fn()
    store.backward(loss)
    analytic = {n: store.grad(n).detach().clone() for n in store.names(trainable=True)}

    entries = [(n, i) for n in analytic for i in range(analytic[n].numel())]
    if max_entries is not None and len(entries) > max_entries:
        g = torch.Generator().manual_seed(seed)
        pick = torch.randperm(len(entries), generator=g)[:max_entries].tolist()
        entries = [entries[k] for k in sorted(pick)]

    failures = []
    worst = 0.0
    with torch.no_grad():
        for name, flat in entries:
            p = store[name].view(-1)
            orig = p[flat].item()
            p[flat] = orig + eps
            up = loss_fn().item()
            p[flat] = orig - eps
            down = loss_fn().item()
            p[flat] = orig
            fd = (up - down) / (2 * eps)
            ad = analytic[name].view(-1)[flat].item()
            rel = abs(fd - ad) / max(abs(fd), abs(ad), abs_floor)
            worst = max(worst, rel)
            if rel > tol:
                idx = tuple(int(k) for k in torch.unravel_index(torch.tensor(flat), store[name].shape))
                failures.append((name, idx, ad, fd))
    store.zero_grad()
    return GradCheckReport(checked=len(entries), max_rel_error=worst, tol=tol, failures=failures)
