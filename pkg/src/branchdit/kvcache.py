"""Cached conditional sampling: condition keys/values are computed once per generation.

Because condition rows never read text/noise keys and never see the
timestep, their per-layer K/V are constant across the whole trajectory.
``prime_cache`` runs the condition branch on its own; each ``cached_step``
then projects only the text/noise rows and attends over
``[K_denoise; K_c1; ...; K_cm]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch

from .attention import CACHEABLE, JOINT, MUTUAL, BranchMask, attention_rows
from .branches import BranchLayout, ConditionTokens, ToyImage, unpatchify
from .cila import OpCounters, check_adapters, denoise_qkv
from .model import DiT, default_mode, from_latent, rope_heads
from .numerics import rmsnorm
from .rope import PositionGrid, rope_angles


class CacheStateError(RuntimeError):
    pass


@dataclass
class KvCache:
    """Per layer, per condition block: post-RoPE keys and values."""

    n_layers: int
    entries: list[list[tuple[torch.Tensor, torch.Tensor]]] = field(default_factory=list)
    primed: bool = False

    def __post_init__(self):
        if not self.entries:
            self.entries = [[] for _ in range(self.n_layers)]

    @property
    def n_blocks(self) -> int:
        return len(self.entries[0]) if self.entries else 0

    def layer(self, l: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return self.entries[l]

    def digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.entries:
            for k, v in layer:
                h.update(k.detach().cpu().numpy().tobytes())
                h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SamplerSchedule:
    steps: int = 25

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one sampling step")

    @property
    def timesteps(self) -> list[float]:
        """``t_T = 1 > ... > t_0 = 0``, uniformly spaced."""
        return torch.linspace(1.0, 0.0, self.steps + 1, dtype=torch.float64).tolist()


def _run_condition_branch(model: DiT, conds: list[ConditionTokens], grids: list[PositionGrid],
                          adapters, mode: str, counters: OpCounters | None):
    layout = BranchLayout(0, 0, tuple((c.kind, c.tokens.shape[0]) for c in conds))
    mask = BranchMask(layout, mode)
    cos, sin = rope_angles(PositionGrid.concat(grids), model.config.rope, model.dtype)
    x = torch.cat([c.tokens for c in conds], dim=0)
    per_layer = []
    for l in range(model.config.layers):
        x, k, v = model.block(l, x, layout, cos, sin, None, mask, adapters, counters)
        per_layer.append([(k[s], v[s]) for s in layout.block_slices()])
    return per_layer


def prime_cache(model: DiT, seq_or_conds, adapters=(), mode: str = MUTUAL,
                counters: OpCounters | None = None, cache: KvCache | None = None) -> KvCache:
    """Run the condition blocks of an assembled sequence through every layer and store their K/V.

    Under mutual masking each block is processed on its own; under
    conditional/joint masking the blocks are processed together (their
    queries may read each other but never text/noise).
    """
    cache = cache if cache is not None else KvCache(model.config.layers)
    if cache.primed:
        raise CacheStateError("cache already primed for this generation")
    seq = seq_or_conds
    layout = seq.layout
    adapters = list(adapters)
    check_adapters(layout, adapters)
    if layout.n_blocks and mode not in CACHEABLE:
        raise CacheStateError(f"mask mode {mode!r} lets condition rows read the denoising branch")
    BranchMask(layout, mode)  # validates mode against the layout
    slices = layout.block_slices()
    conds = [ConditionTokens(kind, seq.features[s], (0, 0), (0, 0)) for (kind, _), s in
             zip(layout.condition_blocks, slices)]
    grids = [PositionGrid(seq.positions.coords[s]) for s in slices]
    if layout.n_blocks:
        if mode == MUTUAL:
            parts = [_run_condition_branch(model, [c], [g], [a], MUTUAL, counters)
                     for c, g, a in zip(conds, grids, adapters)]
            for l in range(model.config.layers):
                cache.entries[l] = [p[l][0] for p in parts]
        else:
            per_layer = _run_condition_branch(model, conds, grids, adapters, mode, counters)
            for l in range(model.config.layers):
                cache.entries[l] = per_layer[l]
    cache.primed = True
    return cache


def cached_velocity(model: DiT, seq, t: float, cache: KvCache, mode: str,
                    counters: OpCounters | None = None) -> torch.Tensor:
    """Velocity from text/noise rows only, reading condition K/V from the cache."""
    layout = seq.layout
    if layout.n_blocks and not cache.primed:
        raise CacheStateError("conditions present but cache not primed")
    if cache.n_blocks != layout.n_blocks:
        raise CacheStateError(f"cache holds {cache.n_blocks} blocks, layout has {layout.n_blocks}")
    cfg = model.config
    nd = layout.n_denoise
    mask = BranchMask(layout, mode)
    cos, sin = rope_angles(PositionGrid(seq.positions.coords[:nd]), cfg.rope, model.dtype)
    c = model.time_vector(t)
    base = model.base
    x = seq.features[:nd]
    for l in range(cfg.layers):
        mods = model.modulation(l, c)
        h = rmsnorm(x, model.p(f"layer{l}.norm1")) * (1 + mods[1]) + mods[0]
        q, k, v = denoise_qkv(h, base.layers[l])
        if counters is not None:
            counters.denoise_qkv += 1
        q = rope_heads(q, cfg.heads, cos, sin)
        k = rope_heads(k, cfg.heads, cos, sin)
        blocks = cache.layer(l)
        k_all = torch.cat([k] + [kc for kc, _ in blocks], dim=0)
        v_all = torch.cat([v] + [vc for _, vc in blocks], dim=0)
        x = x + attention_rows(q, k_all, v_all, mask, cfg.heads, range(nd), model.p(f"layer{l}.W_o"),
                               counters=counters)
        h = rmsnorm(x, model.p(f"layer{l}.norm2")) * (1 + mods[3]) + mods[2]
        x = x + model._mlp(l, h)
    return model.head(x[layout.n_text:nd], c)


def cached_step(model: DiT, x_t: torch.Tensor, t: float, t_next: float, prompt, cache: KvCache,
                conditions=(), mode: str | None = None, counters: OpCounters | None = None) -> torch.Tensor:
    """One Euler step ``x + (t_next - t) * v`` using the cache for all condition K/V."""
    seq = model.assemble(x_t, prompt, conditions)
    mode = mode or default_mode(seq.layout.n_blocks)
    v = cached_velocity(model, seq, t, cache, mode, counters)
    return x_t + (t_next - t) * v


def uncached_step(model: DiT, x_t: torch.Tensor, t: float, t_next: float, prompt, conditions=(), adapters=(),
                  mode: str | None = None, counters: OpCounters | None = None) -> torch.Tensor:
    """Reference step that recomputes the condition branch jointly with the denoising rows."""
    v = model(x_t, t, prompt, conditions, adapters, mode, counters)
    return x_t + (t_next - t) * v


def initial_noise(model: DiT, seed: int) -> torch.Tensor:
    cfg = model.config
    g = torch.Generator().manual_seed(seed)
    return torch.randn(cfg.n_noise, cfg.patch_dim, generator=g, dtype=torch.float64).to(model.dtype)


def sample_latent(model: DiT, prompt, conditions=(), adapters=(), seed: int = 0,
                  schedule: SamplerSchedule = SamplerSchedule(), use_cache: bool = True,
                  mode: str | None = None, counters: OpCounters | None = None,
                  return_cache: bool = False):
    """Integrate the velocity field from ``t=1`` to ``t=0``; returns final latent tokens."""
    adapters = list(adapters)
    with torch.no_grad():
        x = initial_noise(model, seed)
        # condition tokens do not depend on x; embed them once
        cond_tokens = [model.embed_condition(c) if not isinstance(c, ConditionTokens) else c for c in conditions]
        mode = mode or default_mode(len(cond_tokens))
        ts = schedule.timesteps
        cache = None
        for t, t_next in zip(ts[:-1], ts[1:]):
            if use_cache:
                if cache is None:
                    cache = prime_cache(model, model.assemble(x, prompt, cond_tokens), adapters, mode, counters)
                x = cached_step(model, x, t, t_next, prompt, cache, cond_tokens, mode, counters)
            else:
                x = uncached_step(model, x, t, t_next, prompt, cond_tokens, adapters, mode, counters)
    return (x, cache) if return_cache else x


def latent_to_image(model: DiT, x: torch.Tensor) -> ToyImage:
    cfg = model.config
    img = unpatchify(from_latent(x), cfg.patch, cfg.channels, cfg.image_size, cfg.image_size)
    return ToyImage(img.pixels.clamp(0.0, 1.0))


def generate(model: DiT, prompt, conditions=(), adapters=(), seed: int = 0,
             schedule: SamplerSchedule = SamplerSchedule(), use_cache: bool = True, mode: str | None = None,
             counters: OpCounters | None = None) -> ToyImage:
    """Seeded noise, one cache priming, ``T`` Euler steps, unpatchify and clamp to ``[0, 1]``."""
    x = sample_latent(model, prompt, conditions, adapters, seed, schedule, use_cache, mode, counters)
    return latent_to_image(model, x)
