"""Invariant suite behind ``branchdit verify``.

Every property returns a measured error that is compared against its
tolerance; exact properties use tolerance 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .attention import CONDITIONAL, JOINT, MUTUAL, BranchMask, masked_attention
from .branches import SPATIAL, SUBJECT, BranchLayout, ToyImage
from .cila import BaseProjection, LoraAdapter, OpCounters, project_qkv
from .kvcache import SamplerSchedule, sample_latent
from .model import DiT, Condition, ModelConfig, flow_loss
from .numerics import check_gradients, softmax_rows
from .rope import (PositionGrid, RopeParams, interpolate_positions, offset_positions, rope_rotate,
                   scale_factors)

FAULT_LEAK_MASK = "leak-mask"
FAULTS = (FAULT_LEAK_MASK,)

# small enough for finite differences: 2 text + 16 noise + 4 condition tokens
TINY = ModelConfig(d_model=16, heads=2, layers=2, patch=2, image_size=8, cond_size=4, vocab=16, rank=2)


@dataclass
class PropertyResult:
    name: str
    error: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<28} error={self.error:.3e}  tol={self.tol:.1e}{extra}"


# -- random fixtures ----------------------------------------------------------

def random_layout(g: torch.Generator, n_blocks: int, max_total: int = 64) -> BranchLayout:
    while True:
        n_text = int(torch.randint(0, 5, (), generator=g))
        n_noise = int(torch.randint(1, 21, (), generator=g))
        sizes = torch.randint(1, 17, (n_blocks,), generator=g).tolist()
        kinds = [SPATIAL if torch.rand((), generator=g) < 0.5 else SUBJECT for _ in sizes]
        if n_text + n_noise + sum(sizes) <= max_total:
            return BranchLayout(n_text, n_noise, tuple(zip(kinds, sizes)))


def _qkv(g: torch.Generator, n: int, d: int = 16):
    return tuple(torch.randn(n, d, generator=g, dtype=torch.float64) for _ in range(3))


# -- mask isolation -------------------------------------------------------------

def condition_leak(n_layouts: int = 100, seed: int = 0, fault: str | None = None) -> float:
    """Largest probability a condition query puts on a text/noise key under the conditional mask."""
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_layouts):
        layout = random_layout(g, 1)
        mask = BranchMask(layout, CONDITIONAL)
        if fault == FAULT_LEAK_MASK:
            mask = mask.with_fault(layout.n_denoise, 0)
        q, k, v = _qkv(g, layout.total)
        _, probs = masked_attention(q, k, v, mask, heads=2, return_probs=True)
        nd = layout.n_denoise
        worst = max(worst, float(probs[:, nd:, :nd].abs().max()))
    return worst


def cross_condition_leak(n_layouts: int = 100, seed: int = 1) -> float:
    """Largest probability between distinct condition blocks under the mutual mask."""
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_layouts):
        layout = random_layout(g, int(torch.randint(2, 4, (), generator=g)))
        q, k, v = _qkv(g, layout.total)
        _, probs = masked_attention(q, k, v, BranchMask(layout, MUTUAL), heads=2, return_probs=True)
        ids = layout.block_ids()
        cond = ids >= 0
        cross = cond[:, None] & cond[None, :] & (ids[:, None] != ids[None, :])
        worst = max(worst, float(probs[:, cross].abs().max()))
        # under mutual masking condition queries also never read text/noise
        worst = max(worst, float(probs[:, layout.n_denoise:, :layout.n_denoise].abs().max()))
    return worst


def protected_rows_perturbation(n_layouts: int = 100, seed: int = 2) -> float:
    """Max change of a condition block's outputs when every row it may not read is perturbed."""
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for trial in range(n_layouts):
        n_blocks = 1 if trial % 2 == 0 else int(torch.randint(2, 4, (), generator=g))
        layout = random_layout(g, n_blocks)
        mode = CONDITIONAL if n_blocks == 1 else MUTUAL
        mask = BranchMask(layout, mode)
        q, k, v = _qkv(g, layout.total)
        out = masked_attention(q, k, v, mask, heads=2)
        ids = layout.block_ids()
        for b, s in enumerate(layout.block_slices()):
            hidden = ids != b  # rows block b must never read
            k2, v2, q2 = k.clone(), v.clone(), q.clone()
            noise = _qkv(g, layout.total)
            k2[hidden] += noise[0][hidden]
            v2[hidden] += noise[1][hidden]
            q2[hidden] += noise[2][hidden]
            out2 = masked_attention(q2, k2, v2, mask, heads=2)
            worst = max(worst, float((out2[s] - out[s]).abs().max()))
    return worst


def joint_reads_other_blocks(seed: int = 3) -> float:
    """Sanity for the ablation mask: joint mode must let blocks read each other (returns 0 if it does)."""
    g = torch.Generator().manual_seed(seed)
    layout = BranchLayout(2, 6, ((SPATIAL, 4), (SUBJECT, 4)))
    q, k, v = _qkv(g, layout.total)
    _, probs = masked_attention(q, k, v, BranchMask(layout, JOINT), heads=2, return_probs=True)
    s0, s1 = layout.block_slices()
    return 0.0 if float(probs[:, s0, s1].min()) > 0 else 1.0


# -- LoRA isolation ---------------------------------------------------------------

def lora_denoise_rows(n_adapters: int = 100, seed: int = 4) -> float:
    """Text/noise Q/K/V rows with random adapters vs. the adapter-free projection (bitwise)."""
    g = torch.Generator().manual_seed(seed)
    d = 16
    worst = 0.0
    for _ in range(n_adapters):
        layout = random_layout(g, int(torch.randint(1, 3, (), generator=g)))
        base = BaseProjection([{w: torch.randn(d, d, generator=g, dtype=torch.float64) for w in "qkvo"}])
        adapters = []
        for kind, _ in layout.condition_blocks:
            ad = LoraAdapter.init(kind, int(torch.randint(1, 5, (), generator=g)), d, 1, g)
            ad.randomize_b(g, scale=1.0)
            adapters.append(ad)
        h = torch.randn(layout.total, d, generator=g, dtype=torch.float64)
        with torch.no_grad():
            with_ad = project_qkv(h, layout, base, adapters)
            without = project_qkv(h, layout, base, [None] * layout.n_blocks)
        nd = layout.n_denoise
        for a, b in zip(with_ad, without):
            worst = max(worst, float((a[:nd] - b[:nd]).abs().max()))
    return worst


def _tiny_inputs(model: DiT, g: torch.Generator, kinds=(SPATIAL,)):
    cfg = model.config
    z = torch.randn(cfg.n_noise, cfg.patch_dim, generator=g, dtype=torch.float64)
    conds = []
    for kind in kinds:
        size = cfg.image_size if kind == SPATIAL else cfg.cond_size
        conds.append(Condition(kind, ToyImage(torch.rand(cfg.channels, size, size, generator=g,
                                                         dtype=torch.float64))))
    return z, conds


def lora_zero_b(n_trials: int = 10, seed: int = 5, config: ModelConfig = TINY) -> float:
    """With B = 0 the full model output must equal the adapter-free base model bitwise."""
    g = torch.Generator().manual_seed(seed)
    model = DiT(config, seed=seed)
    model.freeze()
    worst = 0.0
    for trial in range(n_trials):
        kinds = (SPATIAL,) if trial % 2 == 0 else (SPATIAL, SUBJECT)
        z, conds = _tiny_inputs(model, g, kinds)
        adapters = [model.new_adapter(c.kind, seed=trial * 7 + i) for i, c in enumerate(conds)]
        t = float(torch.rand((), generator=g))
        with torch.no_grad():
            a = model(z, t, [1, 2], conds, adapters)
            b = model(z, t, [1, 2], conds, [None] * len(conds))
        worst = max(worst, float((a - b).abs().max()))
    return worst


# -- gradients ------------------------------------------------------------------

def _grad_fixture(seed: int):
    g = torch.Generator().manual_seed(seed)
    model = DiT(TINY, seed=seed)
    model.freeze()
    adapter = model.new_adapter(SPATIAL, seed=seed)
    adapter.randomize_b(g, scale=0.5)
    z, conds = _tiny_inputs(model, g)
    x0 = torch.randn(z.shape, generator=g, dtype=torch.float64)
    eps = torch.randn(z.shape, generator=g, dtype=torch.float64)
    t = 0.37
    zt = (1 - t) * x0 + t * eps

    def loss():
        return flow_loss(model(zt, t, [1, 2], conds, [adapter], mode=CONDITIONAL), eps, x0)

    return model, adapter, loss


def adapter_gradients(min_entries: int = 100, seed: int = 6, tol: float = 1e-4) -> tuple[float, int]:
    """Worst relative error between autodiff and central differences on adapter entries."""
    _, adapter, loss = _grad_fixture(seed)
    report = check_gradients(loss, adapter.store, eps=1e-5, tol=tol, max_entries=max(min_entries, 120), seed=seed)
    return report.max_rel_error, report.checked


def base_gradients_zero(seed: int = 7) -> float:
    """Largest base-parameter gradient after a stage-2 backward pass (must be exactly 0)."""
    model, adapter, loss = _grad_fixture(seed)
    before = model.store.values_snapshot()
    opt = torch.optim.Adam(adapter.store.trainable_tensors(), lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        loss().backward()
        opt.step()
    worst = 0.0
    for name in model.store:
        p = model.store[name]
        if p.grad is not None:
            worst = max(worst, float(p.grad.abs().max()))
        worst = max(worst, float((p.detach() - before[name]).abs().max()))
    return worst


# -- positions ------------------------------------------------------------------

def pai_cases() -> float:
    """Exact PAI and PE-offset cases; returns the largest deviation."""
    errs = []
    errs.append(max(abs(a - b) for a, b in zip(scale_factors(16, 16, 8, 8), (2.0, 2.0))))
    errs.append(max(abs(a - b) for a, b in zip(scale_factors(12, 20, 4, 5), (3.0, 4.0))))
    integer = interpolate_positions(3, 4)
    expect = torch.tensor([[i, j] for i in range(3) for j in range(4)], dtype=torch.float64)
    errs.append(float((integer.coords - expect).abs().max()))
    scaled = interpolate_positions(2, 2, 2.0, 2.0)
    expect = torch.tensor([[0, 0], [0, 2], [2, 0], [2, 2]], dtype=torch.float64)
    errs.append(float((scaled.coords - expect).abs().max()))
    grid = interpolate_positions(3, 3, 1.5, 0.5)
    shifted = offset_positions(grid, 1, 64.0)
    errs.append(float((shifted.coords[:, 0] - grid.coords[:, 0] - 64.0).abs().max()))
    errs.append(float((shifted.coords[:, 1] - grid.coords[:, 1]).abs().max()))
    return max(errs)


def rope_relative(n_trials: int = 200, seed: int = 8, head_dim: int = 16, base: float = 100.0) -> float:
    """|<R(p+s)q, R(r+s)k> - <R(p)q, R(r)k>| over random q, k, positions and fractional shifts."""
    g = torch.Generator().manual_seed(seed)
    params = RopeParams(head_dim, base)
    worst = 0.0
    for _ in range(n_trials):
        q = torch.randn(1, head_dim, generator=g, dtype=torch.float64)
        k = torch.randn(1, head_dim, generator=g, dtype=torch.float64)
        p, r, s = (torch.rand(1, 2, generator=g, dtype=torch.float64) * 32 for _ in range(3))
        ref = (rope_rotate(q, PositionGrid(p), params) * rope_rotate(k, PositionGrid(r), params)).sum()
        moved = (rope_rotate(q, PositionGrid(p + s), params) * rope_rotate(k, PositionGrid(r + s), params)).sum()
        worst = max(worst, float((ref - moved).abs()))
    return worst


# -- numerics -------------------------------------------------------------------

def softmax_normalised(n_trials: int = 50, seed: int = 9) -> float:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_trials):
        x = torch.randn(5, 7, generator=g, dtype=torch.float64) * 30
        x[torch.rand(5, 7, generator=g) < 0.3] = -math.inf
        x[:, 0] = 0.0  # keep every row non-degenerate
        p = softmax_rows(x)
        worst = max(worst, float((p.sum(-1) - 1).abs().max()))
        if bool((p[torch.isinf(x)] != 0).any()):
            worst = math.inf
    return worst


# -- cache ----------------------------------------------------------------------

def _cache_fixture(seed: int, n_conditions: int, config: ModelConfig):
    g = torch.Generator().manual_seed(10_000 + seed)
    model = DiT(config, seed=seed)
    model.freeze()
    kinds = (SPATIAL, SUBJECT)[:n_conditions]
    _, conds = _tiny_inputs(model, g, kinds)
    adapters = []
    for i, c in enumerate(conds):
        ad = model.new_adapter(c.kind, seed=seed * 10 + i)
        ad.randomize_b(g)
        adapters.append(ad)
    return model, conds, adapters


def cache_equivalence(seeds=range(2), conditions=(1, 2), steps: int = 5, config: ModelConfig = TINY) -> float:
    """Max |cached - uncached| over final latents."""
    worst = 0.0
    for seed in seeds:
        for n in conditions:
            model, conds, adapters = _cache_fixture(seed, n, config)
            sched = SamplerSchedule(steps)
            a = sample_latent(model, [1, 2], conds, adapters, seed=seed, schedule=sched, use_cache=True)
            b = sample_latent(model, [1, 2], conds, adapters, seed=seed, schedule=sched, use_cache=False)
            worst = max(worst, float((a - b).abs().max()))
    return worst


def projection_counts(steps: int = 25, config: ModelConfig = TINY) -> tuple[int, int, int]:
    """Counted condition-QKV calls, cached vs. uncached, against ``layers * blocks (* T)``.

    Returns (cached, uncached, mismatch) where mismatch is the total absolute deviation.
    """
    mismatch = 0
    cached_total = uncached_total = 0
    for n in (1, 2):
        model, conds, adapters = _cache_fixture(0, n, config)
        sched = SamplerSchedule(steps)
        c1, c2 = OpCounters(), OpCounters()
        sample_latent(model, [1], conds, adapters, schedule=sched, use_cache=True, counters=c1)
        sample_latent(model, [1], conds, adapters, schedule=sched, use_cache=False, counters=c2)
        expect = config.layers * n
        mismatch += abs(c1.cond_qkv - expect) + abs(c2.cond_qkv - expect * steps)
        mismatch += abs(c1.cond_qkv * steps - c2.cond_qkv)
        cached_total += c1.cond_qkv
        uncached_total += c2.cond_qkv
    return cached_total, uncached_total, mismatch


# -- registry -------------------------------------------------------------------

def _prop(name: str, tol: float, fn: Callable[[], float], detail: str = "") -> PropertyResult:
    return PropertyResult(name, float(fn()), tol, detail)


def registry(fault: str | None = None) -> list[tuple[str, Callable[[], PropertyResult]]]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")

    def grads():
        err, n = adapter_gradients()
        return PropertyResult("adapter-grad-vs-fd", err, 1e-4, f"{n} entries")

    def counts():
        c, u, mismatch = projection_counts()
        return PropertyResult("projection-counts", float(mismatch), 0.0, f"cached {c}, uncached {u}")

    return [
        ("softmax-normalised", lambda: _prop("softmax-normalised", 1e-12, softmax_normalised)),
        ("mask-zero-leak", lambda: _prop("mask-zero-leak", 0.0, lambda: condition_leak(fault=fault),
                                         "conditional mode, 100 layouts")),
        ("mask-cross-condition", lambda: _prop("mask-cross-condition", 0.0, cross_condition_leak,
                                               "mutual mode, 100 layouts")),
        ("mask-protected-rows", lambda: _prop("mask-protected-rows", 0.0, protected_rows_perturbation,
                                              "bitwise under perturbation")),
        ("mask-joint-open", lambda: _prop("mask-joint-open", 0.0, joint_reads_other_blocks)),
        ("lora-denoise-rows", lambda: _prop("lora-denoise-rows", 0.0, lora_denoise_rows, "100 adapters")),
        ("lora-zero-b", lambda: _prop("lora-zero-b", 0.0, lora_zero_b, "bitwise model output")),
        ("adapter-grad-vs-fd", grads),
        ("base-grad-zero", lambda: _prop("base-grad-zero", 0.0, base_gradients_zero)),
        ("pai-cases", lambda: _prop("pai-cases", 0.0, pai_cases)),
        ("rope-relative", lambda: _prop("rope-relative", 1e-9, rope_relative, "fractional shifts")),
        ("cache-equivalence", lambda: _prop("cache-equivalence", 1e-9, cache_equivalence)),
        ("projection-counts", counts),
    ]


def run_all(fault: str | None = None, echo=print) -> list[PropertyResult]:
    results = []
    for _, fn in registry(fault):
        res = fn()
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
