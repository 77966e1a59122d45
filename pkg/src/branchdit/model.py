"""Miniature diffusion transformer over branched token sequences.

Only text/noise rows see the timestep (scale-shift modulation); condition
rows are a pure function of the condition images and adapters, which is the
property the KV cache depends on.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import BranchMask, masked_attention, split_heads, merge_heads
from .branches import (
    KINDS, SPATIAL, BranchedSequence, BranchLayout, ConditionTokens, ToyImage, assemble,
    encode_text, patch_tokens, resize_condition, unpatchify,
)
from .cila import BaseProjection, LoraAdapter, OpCounters, check_adapters, project_qkv
from .numerics import DEFAULT_DTYPE, ParamStore, ShapeError, rmsnorm
from .rope import PositionGrid, RopeParams, apply_rotation, interpolate_positions, rope_angles

DITB_MAGIC = b"DITB"
DITB_VERSION = 1


class TrainingError(RuntimeError):
    pass


class FrozenViolation(AssertionError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    patch: int = 2
    image_size: int = 32
    cond_size: int = 16
    channels: int = 1
    vocab: int = 16
    rank: int = 4
    mlp_ratio: int = 4
    base_frequency: float = 100.0
    delta_h: float = 64.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 4:
            raise ValueError("head_dim must be divisible by 4")
        if self.image_size % self.patch or self.cond_size % self.patch:
            raise ValueError("resolutions must be divisible by the patch size")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def noise_grid(self) -> tuple[int, int]:
        return self.image_size // self.patch, self.image_size // self.patch

    @property
    def n_noise(self) -> int:
        gh, gw = self.noise_grid
        return gh * gw

    @property
    def cond_grid(self) -> tuple[int, int]:
        return self.cond_size // self.patch, self.cond_size // self.patch

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.base_frequency)


_CONFIG_INTS = ("d_model", "heads", "layers", "patch", "image_size", "cond_size", "channels", "vocab",
                "rank", "mlp_ratio")
_CONFIG_FLOATS = ("base_frequency", "delta_h")


@dataclass
class Condition:
    """A condition image; spatial ones describe the full output canvas."""

    kind: str
    image: ToyImage

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")


@dataclass
class FlowState:
    x0: torch.Tensor
    eps: torch.Tensor
    t: float
    z_t: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.z_t = (1.0 - self.t) * self.x0 + self.t * self.eps

    @property
    def target(self) -> torch.Tensor:
        return self.eps - self.x0


@dataclass
class Sample:
    prompt: list[int]
    target: ToyImage
    condition: ToyImage | None = None


def to_latent(pixels: torch.Tensor) -> torch.Tensor:
    return pixels * 2.0 - 1.0


def from_latent(latent: torch.Tensor) -> torch.Tensor:
    return (latent + 1.0) / 2.0


def timestep_embedding(t: float, dim: int, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    arg = 1000.0 * float(t) * freqs
    return torch.cat([torch.cos(arg), torch.sin(arg)]).to(dtype)


def flow_loss(velocity: torch.Tensor, eps: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted velocity and ``eps - x0``."""
    if not (velocity.shape == eps.shape == x0.shape):
        raise ShapeError(f"flow loss shapes differ: {tuple(velocity.shape)}, {tuple(eps.shape)}, {tuple(x0.shape)}")
    return ((velocity - (eps - x0)) ** 2).mean()


def rope_heads(x: torch.Tensor, heads: int, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return merge_heads(apply_rotation(split_heads(x, heads), cos, sin))


class DiT:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = dtype
        self.store = ParamStore()
        self._init_params(torch.Generator().manual_seed(seed))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, g: torch.Generator) -> None:
        cfg, d = self.config, self.config.d_model
        hidden = d * cfg.mlp_ratio

        def normal(*shape, std):
            return (torch.randn(*shape, generator=g, dtype=torch.float64) * std).to(self.dtype)

        def zeros(*shape):
            return torch.zeros(*shape, dtype=self.dtype)

        def ones(*shape):
            return torch.ones(*shape, dtype=self.dtype)

        add = self.store.add
        add("text_embed", normal(cfg.vocab, d, std=1.0))
        add("patch_embed", normal(cfg.patch_dim, d, std=cfg.patch_dim ** -0.5))
        add("patch_bias", zeros(d))
        add("time_w1", normal(d, d, std=d ** -0.5))
        add("time_b1", zeros(d))
        add("time_w2", normal(d, d, std=d ** -0.5))
        add("time_b2", zeros(d))
        resid_std = (d ** -0.5) / math.sqrt(2 * max(cfg.layers, 1))
        for l in range(cfg.layers):
            add(f"layer{l}.norm1", ones(d))
            for w in ("q", "k", "v"):
                add(f"layer{l}.W_{w}", normal(d, d, std=d ** -0.5))
            add(f"layer{l}.W_o", normal(d, d, std=resid_std))
            add(f"layer{l}.norm2", ones(d))
            add(f"layer{l}.mlp_w1", normal(d, hidden, std=d ** -0.5))
            add(f"layer{l}.mlp_b1", zeros(hidden))
            add(f"layer{l}.mlp_w2", normal(hidden, d, std=(hidden ** -0.5) / math.sqrt(2 * cfg.layers)))
            add(f"layer{l}.mlp_b2", zeros(d))
            add(f"layer{l}.mod_w", zeros(d, 4 * d))
            add(f"layer{l}.mod_b", zeros(4 * d))
        add("final_norm", ones(d))
        add("final_mod_w", zeros(d, 2 * d))
        add("final_mod_b", zeros(2 * d))
        add("head_w", normal(d, cfg.patch_dim, std=0.1 * d ** -0.5))
        add("head_b", zeros(cfg.patch_dim))

    def p(self, name: str) -> torch.Tensor:
        return self.store[name]

    @property
    def base(self) -> BaseProjection:
        return BaseProjection([
            {w: self.store[f"layer{l}.W_{w}"] for w in ("q", "k", "v", "o")}
            for l in range(self.config.layers)
        ])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.store:
            h.update(name.encode())
            h.update(self.store[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        self.store.zero_grad()
        self.store.set_trainable(False)

    def unfreeze(self) -> None:
        self.store.set_trainable(True)

    def new_adapter(self, kind: str, seed: int = 0) -> LoraAdapter:
        cfg = self.config
        return LoraAdapter.init(kind, cfg.rank, cfg.d_model, cfg.layers,
                                torch.Generator().manual_seed(seed), self.dtype)

    # -- embedding ----------------------------------------------------------

    def embed_patches(self, raw: torch.Tensor) -> torch.Tensor:
        return raw.to(self.dtype) @ self.p("patch_embed") + self.p("patch_bias")

    def image_latent_tokens(self, img: ToyImage) -> torch.Tensor:
        raw, _ = patch_tokens(img, self.config.patch)
        return to_latent(raw.to(self.dtype))

    def embed_condition(self, cond: Condition) -> ConditionTokens:
        cfg = self.config
        img = cond.image
        if (img.height, img.width) != (cfg.cond_size, cfg.cond_size):
            img = resize_condition(img, cfg.cond_size, cfg.cond_size)
        if img.channels != cfg.channels:
            raise ShapeError(f"condition has {img.channels} channels, model expects {cfg.channels}")
        tokens = self.embed_patches(self.image_latent_tokens(img))
        return ConditionTokens(cond.kind, tokens, cfg.cond_grid, cfg.noise_grid)

    def assemble(self, z_t: torch.Tensor, prompt, conditions=()) -> BranchedSequence:
        cfg = self.config
        if z_t.shape != (cfg.n_noise, cfg.patch_dim):
            raise ShapeError(f"noisy latent must be {(cfg.n_noise, cfg.patch_dim)}, got {tuple(z_t.shape)}")
        text = encode_text(prompt, self.p("text_embed"))
        noise = self.embed_patches(z_t)
        conds = [c if isinstance(c, ConditionTokens) else self.embed_condition(c) for c in conditions]
        return assemble(text, noise, interpolate_positions(*cfg.noise_grid), conds, cfg.delta_h)

    # -- timestep conditioning ---------------------------------------------

    def time_vector(self, t: float) -> torch.Tensor:
        e = timestep_embedding(t, self.config.d_model, self.dtype)
        h = F.silu(e @ self.p("time_w1") + self.p("time_b1"))
        return F.silu(h @ self.p("time_w2") + self.p("time_b2"))

    def modulation(self, l: int, c: torch.Tensor) -> tuple[torch.Tensor, ...]:
        return (c @ self.p(f"layer{l}.mod_w") + self.p(f"layer{l}.mod_b")).chunk(4)

    # -- blocks -------------------------------------------------------------

    def _mlp(self, l: int, h: torch.Tensor) -> torch.Tensor:
        hidden = F.gelu(h @ self.p(f"layer{l}.mlp_w1") + self.p(f"layer{l}.mlp_b1"))
        return hidden @ self.p(f"layer{l}.mlp_w2") + self.p(f"layer{l}.mlp_b2")

    def _norm(self, l: int, which: int, x: torch.Tensor, n_denoise: int, mod) -> torch.Tensor:
        # condition rows carry no timestep modulation so their K/V stay cacheable
        h = rmsnorm(x, self.p(f"layer{l}.norm{which}"))
        if not n_denoise:
            return h
        shift, scale = mod
        head = h[:n_denoise] * (1 + scale) + shift
        return head if n_denoise == h.shape[0] else torch.cat([head, h[n_denoise:]], dim=0)

    def block(self, l: int, x: torch.Tensor, layout: BranchLayout, cos: torch.Tensor, sin: torch.Tensor,
              c: torch.Tensor | None, mask: BranchMask, adapters=(), counters: OpCounters | None = None,
              probe: list | None = None):
        """One transformer block over a whole branched sequence; returns (x, post-RoPE K, V).

        When ``probe`` is a list, this layer's attention probabilities are appended to it.
        """
        cfg = self.config
        nd = layout.n_denoise
        mods = self.modulation(l, c) if nd else (None,) * 4
        h = self._norm(l, 1, x, nd, mods[0:2])
        q, k, v = project_qkv(h, layout, self.base, adapters, l, counters)
        q = rope_heads(q, cfg.heads, cos, sin)
        k = rope_heads(k, cfg.heads, cos, sin)
        if probe is None:
            att = masked_attention(q, k, v, mask, cfg.heads, self.p(f"layer{l}.W_o"), counters=counters)
        else:
            att, probs = masked_attention(q, k, v, mask, cfg.heads, self.p(f"layer{l}.W_o"), True, counters)
            probe.append(probs)
        x = x + att
        h = self._norm(l, 2, x, nd, mods[2:4])
        return x + self._mlp(l, h), k, v

    def head(self, x_noise: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = (c @ self.p("final_mod_w") + self.p("final_mod_b")).chunk(2)
        h = rmsnorm(x_noise, self.p("final_norm")) * (1 + scale) + shift
        return h @ self.p("head_w") + self.p("head_b")

    def forward_sequence(self, seq: BranchedSequence, t: float, adapters=(), mode: str = "conditional",
                         counters: OpCounters | None = None, keep_kv: bool = False, probe: list | None = None):
        """Velocity for the noise rows of an assembled sequence (optionally with per-layer K/V)."""
        layout = seq.layout
        check_adapters(layout, adapters)
        mask = BranchMask(layout, mode)
        cos, sin = rope_angles(seq.positions, self.config.rope, self.dtype)
        c = self.time_vector(t)
        x = seq.features
        kvs = []
        for l in range(self.config.layers):
            x, k, v = self.block(l, x, layout, cos, sin, c, mask, adapters, counters, probe)
            if keep_kv:
                kvs.append((k, v))
        vel = self.head(x[layout.n_text:layout.n_denoise], c)
        return (vel, kvs) if keep_kv else vel

    def forward(self, z_t: torch.Tensor, t: float, prompt, conditions=(), adapters=(), mode: str | None = None,
                counters: OpCounters | None = None) -> torch.Tensor:
        """Predicted velocity (n_noise x patch_dim) for noisy latent tokens ``z_t`` at time ``t``."""
        seq = self.assemble(z_t, prompt, conditions)
        if mode is None:
            mode = default_mode(seq.layout.n_blocks)
        return self.forward_sequence(seq, t, adapters, mode, counters)

    __call__ = forward

    # -- checkpoint ---------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config
        chunks = [
            DITB_MAGIC,
            struct.pack("<I", DITB_VERSION),
            struct.pack(f"<{len(_CONFIG_INTS)}I", *(getattr(cfg, k) for k in _CONFIG_INTS)),
            struct.pack(f"<{len(_CONFIG_FLOATS)}d", *(getattr(cfg, k) for k in _CONFIG_FLOATS)),
        ]
        for name in self.store:
            chunks.append(np.ascontiguousarray(self.store[name].detach().cpu().numpy().astype("<f8")).tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, dtype=DEFAULT_DTYPE) -> "DiT":
        buf = Path(path).read_bytes()
        if buf[:4] != DITB_MAGIC:
            raise ValueError(f"{path}: not a DITB checkpoint")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != DITB_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off = 8
        ints = struct.unpack_from(f"<{len(_CONFIG_INTS)}I", buf, off)
        off += 4 * len(_CONFIG_INTS)
        floats = struct.unpack_from(f"<{len(_CONFIG_FLOATS)}d", buf, off)
        off += 8 * len(_CONFIG_FLOATS)
        cfg = ModelConfig(**dict(zip(_CONFIG_INTS, ints)), **dict(zip(_CONFIG_FLOATS, floats)))
        model = cls(cfg, dtype=dtype)
        with torch.no_grad():
            for name in model.store:
                p = model.store[name]
                arr = np.frombuffer(buf, dtype="<f8", count=p.numel(), offset=off)
                off += arr.nbytes
                p.copy_(torch.tensor(arr.reshape(tuple(p.shape)), dtype=dtype))
        if off != len(buf):
            raise ValueError(f"{path}: trailing bytes after parameters")
        return model


def default_mode(n_blocks: int) -> str:
    return "conditional" if n_blocks == 1 else "mutual"


# -- training ---------------------------------------------------------------

def _draw(model: DiT, sample: Sample, g: torch.Generator) -> FlowState:
    x0 = model.image_latent_tokens(sample.target)
    t = float(torch.rand((), generator=g, dtype=torch.float64))
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64).to(model.dtype)
    return FlowState(x0, eps, t)


def _conditions(kind: str | None, sample: Sample) -> list[Condition]:
    if kind is None:
        return []
    if sample.condition is None:
        raise ValueError("conditional training sample without a condition image")
    return [Condition(kind, sample.condition)]


def evaluation_loss(model: DiT, samples: list[Sample], kind: str | None = None, adapter: LoraAdapter | None = None,
                    draws: int = 64, seed: int = 1234) -> float:
    """Mean flow loss over a fixed, seeded set of (sample, t, noise) draws."""
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for d in range(draws):
            sample = samples[d % len(samples)]
            fs = _draw(model, sample, g)
            adapters = [adapter] if kind is not None else []
            v = model(fs.z_t, fs.t, sample.prompt, _conditions(kind, sample), adapters)
            total += float(flow_loss(v, fs.eps, fs.x0))
    return total / draws


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def train_stage1(model: DiT, samples: list[Sample], steps: int, lr: float = 1e-3, seed: int = 0,
                 on_step=None) -> list[float]:
    """Unconditional text-to-image flow matching, batch size 1. Returns per-step losses."""
    if not samples and steps:
        raise ValueError("empty dataset")
    model.unfreeze()
    opt = _adam(model.store.trainable_tensors(), lr)
    g = torch.Generator().manual_seed(seed)
    losses = []
    for step in range(steps):
        sample = samples[int(torch.randint(len(samples), (), generator=g))]
        fs = _draw(model, sample, g)
        opt.zero_grad(set_to_none=True)
        loss = flow_loss(model(fs.z_t, fs.t, sample.prompt), fs.eps, fs.x0)
        if not torch.isfinite(loss):
            raise TrainingError(f"stage-1 loss diverged at step {step}")
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1])
    model.freeze()
    return losses


def train_stage2(model: DiT, kind: str, samples: list[Sample], steps: int, lr: float = 1e-3, seed: int = 0,
                 on_step=None, adapter: LoraAdapter | None = None) -> tuple[LoraAdapter, list[float]]:
    """Train one condition adapter against a frozen base under the conditional mask."""
    if not samples and steps:
        raise ValueError("empty dataset")
    model.freeze()
    if adapter is None:
        adapter = model.new_adapter(kind, seed)
    elif adapter.kind != kind:
        raise ValueError(f"adapter kind {adapter.kind} != {kind}")
    opt = _adam(adapter.store.trainable_tensors(), lr)
    g = torch.Generator().manual_seed(seed + 1)
    base_params = [model.store[n] for n in model.store]
    losses = []
    for step in range(steps):
        sample = samples[int(torch.randint(len(samples), (), generator=g))]
        fs = _draw(model, sample, g)
        opt.zero_grad(set_to_none=True)
        v = model(fs.z_t, fs.t, sample.prompt, _conditions(kind, sample), [adapter], mode="conditional")
        loss = flow_loss(v, fs.eps, fs.x0)
        if not torch.isfinite(loss):
            raise TrainingError(f"stage-2 loss diverged at step {step}")
        loss.backward()
        for p in base_params:
            if p.grad is not None and bool(p.grad.ne(0).any()):
                raise FrozenViolation("base parameter received a gradient during adapter training")
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1])
    return adapter, losses
