"""Branch-structured attention masks and masked multi-head attention.

Masks are evaluated from the layout's block intervals; the engine never
builds an ``n x n`` mask. Per query group (text/noise, or one condition
block) there is a single additive key mask row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .branches import BranchLayout
from .cila import OpCounters
from .numerics import DegenerateRowError, ShapeError, softmax_rows

NONE = "none"
CONDITIONAL = "conditional"  # condition queries never read text/noise keys
MUTUAL = "mutual"            # ... and never read other condition blocks
JOINT = "joint"              # condition blocks read each other, never text/noise (no cross-condition blocking)
MUTUAL_OPEN = "mutual_open"  # cross-condition blocking only; condition queries may read text/noise
MODES = (NONE, CONDITIONAL, MUTUAL, JOINT, MUTUAL_OPEN)
# modes under which condition rows never depend on text/noise state
CACHEABLE = (CONDITIONAL, MUTUAL, JOINT)


@dataclass(frozen=True)
class BranchMask:
    layout: BranchLayout
    mode: str
    fault: tuple[int, int] | None = None  # verification only: flip one (query, key) entry

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.mode == CONDITIONAL and self.layout.n_blocks != 1:
            raise ValueError(f"conditional mode needs exactly one condition block, got {self.layout.n_blocks}")

    def with_fault(self, i: int, j: int) -> "BranchMask":
        return BranchMask(self.layout, self.mode, (i, j))


def _allowed(mode: str, bq: int, bk: int) -> bool:
    if mode == NONE or bq < 0:
        return True
    if mode in (CONDITIONAL, JOINT):
        return bk >= 0
    if mode == MUTUAL:
        return bk == bq
    if mode == MUTUAL_OPEN:
        return bk < 0 or bk == bq
    raise AssertionError(mode)


def mask_logit(mask: BranchMask, i: int, j: int) -> float:
    """Additive logit mask entry for query ``i`` and key ``j``: 0 or -inf."""
    n = mask.layout.total
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"mask index ({i}, {j}) outside {n}x{n}")
    ok = _allowed(mask.mode, mask.layout.block_of(i), mask.layout.block_of(j))
    if mask.fault == (i, j):
        ok = not ok
    return 0.0 if ok else -math.inf


def query_groups(layout: BranchLayout, rows: range) -> list[tuple[int, range]]:
    """Split a contiguous row range into ``(group, sub-range)`` by branch block."""
    bounds = [(-1, 0, layout.n_denoise)] + [(b, s.start, s.stop) for b, s in enumerate(layout.block_slices())]
    out = []
    for g, lo, hi in bounds:
        a, b = max(lo, rows.start), min(hi, rows.stop)
        if a < b:
            out.append((g, range(a, b)))
    return out


def group_key_mask(mask: BranchMask, group: int, rows: range, dtype=torch.float64) -> torch.Tensor | None:
    """Key mask for one query group: ``None`` (all zero), a ``(1, n)`` row, or ``(len(rows), n)`` if faulted."""
    layout = mask.layout
    n = layout.total
    key_blocks = layout.block_ids()
    if mask.mode == NONE or group < 0:
        allowed = torch.ones(n, dtype=torch.bool)
    elif mask.mode in (CONDITIONAL, JOINT):
        allowed = key_blocks >= 0
    elif mask.mode == MUTUAL:
        allowed = key_blocks == group
    else:
        allowed = (key_blocks < 0) | (key_blocks == group)
    fault_row = mask.fault is not None and mask.fault[0] in rows
    if bool(allowed.all()) and not fault_row:
        return None
    row = torch.where(allowed, 0.0, -math.inf).to(dtype)[None]
    if fault_row:
        row = row.repeat(len(rows), 1)
        i, j = mask.fault
        r = i - rows.start
        row[r, j] = -math.inf if row[r, j] == 0 else 0.0
    return row


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"d_model {d} not divisible by {heads} heads")
    return x.reshape(n, heads, d // heads).transpose(0, 1)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    h, n, dh = x.shape
    return x.transpose(0, 1).reshape(n, h * dh)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
           key_mask: torch.Tensor | None = None, return_probs: bool = False):
    """Multi-head attention of ``q (m, d)`` over ``k, v (n, d)`` under an additive key mask.

    A single-row mask is applied by dropping the masked keys outright, so
    their probabilities are exact zeros; a per-row mask goes through
    ``softmax_rows``. Returns (merged output, probs or None).
    """
    n = k.shape[0]
    keep = None
    if key_mask is not None and key_mask.shape[0] == 1:
        keep = torch.isfinite(key_mask[0]).nonzero().squeeze(1)
        k, v = k[keep], v[keep]
        key_mask = None
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    if key_mask is None:
        if logits.shape[-1] == 0:
            raise DegenerateRowError("query group has no permitted keys")
        probs = torch.softmax(logits, dim=-1)
    else:
        probs = softmax_rows(logits + key_mask)
    out = merge_heads(probs @ vh)
    if not return_probs:
        return out, None
    if keep is not None:
        full = probs.new_zeros(*probs.shape[:-1], n)
        full[..., keep] = probs
        probs = full
    return out, probs


def attention_rows(q_rows: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: BranchMask, heads: int,
                   rows: range, w_o: torch.Tensor | None = None, return_probs: bool = False,
                   counters: OpCounters | None = None):
    """Attention outputs for query rows ``rows`` (layout indices) against the full key/value set."""
    n = mask.layout.total
    if k.shape[0] != n or v.shape[0] != n:
        raise ShapeError(f"keys/values have {k.shape[0]}/{v.shape[0]} rows, layout has {n}")
    if q_rows.shape[0] != len(rows):
        raise ShapeError(f"{q_rows.shape[0]} query rows for a range of {len(rows)}")
    if rows.start < 0 or rows.stop > n:
        raise ShapeError(f"rows {rows} outside layout of {n}")
    d = k.shape[1]
    if len(rows) == 0:
        out = q_rows.new_zeros(0, d if w_o is None else w_o.shape[1])
        return (out, q_rows.new_zeros(heads, 0, n)) if return_probs else out
    outs, probs = [], []
    for group, sub in query_groups(mask.layout, rows):
        lo, hi = sub.start - rows.start, sub.stop - rows.start
        o, p = attend(q_rows[lo:hi], k, v, heads, group_key_mask(mask, group, sub, q_rows.dtype), return_probs)
        outs.append(o)
        probs.append(p)
    if counters is not None:
        counters.attention_rows += len(rows)
    out = torch.cat(outs, dim=0)
    if w_o is not None:
        out = out @ w_o
    if return_probs:
        return out, torch.cat(probs, dim=1)
    return out


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: BranchMask, heads: int,
                     w_o: torch.Tensor | None = None, return_probs: bool = False,
                     counters: OpCounters | None = None):
    """Full-sequence masked attention: ``softmax(Q K^T / sqrt(d_head) + M) V`` per head, then ``W_o``."""
    n = mask.layout.total
    if not (q.shape[0] == k.shape[0] == v.shape[0] == n):
        raise ShapeError(f"Q/K/V rows {q.shape[0]}/{k.shape[0]}/{v.shape[0]} != layout {n}")
    return attention_rows(q, k, v, mask, heads, range(n), w_o, return_probs, counters)
