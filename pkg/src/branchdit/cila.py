"""Condition-injection LoRA: shared frozen QKV plus low-rank deltas on condition tokens only."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .branches import KINDS, BranchLayout, LayoutError
from .numerics import DEFAULT_DTYPE, ParamStore, ShapeError

QKV = ("q", "k", "v")
CILA_MAGIC = b"CILA"
CILA_VERSION = 1


@dataclass
class OpCounters:
    """Instrumentation for the bench command; incremented by the engine."""

    cond_qkv: int = 0        # one per (layer, condition block) projection
    denoise_qkv: int = 0     # one per layer of text/noise projection
    attention_rows: int = 0  # query rows pushed through attention

    def reset(self) -> None:
        self.cond_qkv = self.denoise_qkv = self.attention_rows = 0


@dataclass
class BaseProjection:
    """Per-layer frozen ``W_q, W_k, W_v, W_o`` (row-vector convention: ``Q = Z @ W_q``)."""

    layers: list[dict[str, torch.Tensor]]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass
class LoraAdapter:
    kind: str
    rank: int
    d_model: int
    n_layers: int
    store: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        if self.rank < 1 or self.rank > self.d_model // 4:
            raise ValueError(f"rank {self.rank} must be in [1, d_model/4 = {self.d_model // 4}]")

    @classmethod
    def init(cls, kind: str, rank: int, d_model: int, n_layers: int,
             generator: torch.Generator | None = None, dtype=DEFAULT_DTYPE) -> "LoraAdapter":
        """A ~ N(0, 1/d_model), B = 0."""
        ad = cls(kind, rank, d_model, n_layers)
        for layer in range(n_layers):
            for w in QKV:
                a = torch.randn(d_model, rank, generator=generator, dtype=torch.float64) / d_model ** 0.5
                ad.store.add(f"{layer}.A_{w}", a.to(dtype))
                ad.store.add(f"{layer}.B_{w}", torch.zeros(rank, d_model, dtype=dtype))
        return ad

    def layer(self, layer: int) -> dict[str, torch.Tensor]:
        return {name: self.store[f"{layer}.{name}"] for w in QKV for name in (f"A_{w}", f"B_{w}")}

    def randomize_b(self, generator: torch.Generator, scale: float = 0.1) -> None:
        """Fill every B with Gaussian noise; used by tests that need a non-trivial delta."""
        with torch.no_grad():
            for name in self.store:
                if ".B_" in name:
                    p = self.store[name]
                    p.copy_(torch.randn(p.shape, generator=generator, dtype=torch.float64).to(p.dtype) * scale)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.store:
            h.update(self.store[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        header = struct.pack(
            "<4sIIIII", CILA_MAGIC, CILA_VERSION, self.d_model, self.rank, self.n_layers, KINDS.index(self.kind)
        )
        chunks = [header]
        for layer in range(self.n_layers):
            for w in QKV:
                for m in ("A", "B"):
                    arr = self.store[f"{layer}.{m}_{w}"].detach().cpu().numpy().astype("<f8")
                    chunks.append(np.ascontiguousarray(arr).tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, dtype=DEFAULT_DTYPE) -> "LoraAdapter":
        buf = Path(path).read_bytes()
        size = struct.calcsize("<4sIIIII")
        magic, version, d_model, rank, n_layers, kind = struct.unpack_from("<4sIIIII", buf, 0)
        if magic != CILA_MAGIC:
            raise ValueError(f"{path}: not a CILA adapter file")
        if version != CILA_VERSION:
            raise ValueError(f"{path}: unsupported adapter version {version}")
        expected = size + n_layers * 6 * d_model * rank * 8
        if len(buf) != expected:
            raise ValueError(f"{path}: truncated or oversized adapter file")
        ad = cls(KINDS[kind], rank, d_model, n_layers)
        off = size
        for layer in range(n_layers):
            for w in QKV:
                for m, shape in (("A", (d_model, rank)), ("B", (rank, d_model))):
                    arr = np.frombuffer(buf, dtype="<f8", count=d_model * rank, offset=off).reshape(shape)
                    off += arr.nbytes
                    ad.store.add(f"{layer}.{m}_{w}", torch.tensor(arr, dtype=dtype))
        return ad


def check_adapters(layout: BranchLayout, adapters) -> None:
    adapters = list(adapters)
    if len(adapters) != layout.n_blocks:
        raise LayoutError(f"{len(adapters)} adapters for {layout.n_blocks} condition blocks")
    for b, ((kind, _), ad) in enumerate(zip(layout.condition_blocks, adapters)):
        if ad is not None and ad.kind != kind:
            raise LayoutError(f"block {b} is {kind} but its adapter is {ad.kind}")


def condition_qkv(z_c: torch.Tensor, base_layer: dict[str, torch.Tensor],
                  adapter_layer: dict[str, torch.Tensor] | None) -> tuple[torch.Tensor, ...]:
    """``Z W + (Z A) B`` for one condition block; no delta when ``adapter_layer`` is None."""
    out = []
    for w in QKV:
        base = z_c @ base_layer[w]
        if adapter_layer is not None:
            base = base + (z_c @ adapter_layer[f"A_{w}"]) @ adapter_layer[f"B_{w}"]
        out.append(base)
    return tuple(out)


def denoise_qkv(z_tn: torch.Tensor, base_layer: dict[str, torch.Tensor]) -> tuple[torch.Tensor, ...]:
    return tuple(z_tn @ base_layer[w] for w in QKV)


def project_qkv(h: torch.Tensor, layout: BranchLayout, base: BaseProjection, adapters=(),
                layer: int = 0, counters: OpCounters | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Q', K', V' for the whole branched sequence at one layer.

    Text/noise rows use only the shared projection; condition block ``j``
    additionally receives adapter ``j``'s low-rank delta.
    """
    adapters = list(adapters)
    if h.shape[0] != layout.total:
        raise ShapeError(f"{h.shape[0]} rows for a layout of {layout.total}")
    check_adapters(layout, adapters)
    base_layer = base.layers[layer]
    parts = [denoise_qkv(h[: layout.n_denoise], base_layer)]
    if counters is not None and layout.n_denoise:
        counters.denoise_qkv += 1
    for s, ad in zip(layout.block_slices(), adapters):
        parts.append(condition_qkv(h[s], base_layer, None if ad is None else ad.layer(layer)))
        if counters is not None:
            counters.cond_qkv += 1
    return tuple(torch.cat([p[i] for p in parts], dim=0) for i in range(3))


@dataclass
class RankReport:
    rank: int
    singular_values: list[float]
    threshold: float


def merge_check(adapter: LoraAdapter, layer: int = 0, which: str = "q", threshold: float = 1e-8) -> RankReport:
    """Numerical rank of the dense delta ``A_w @ B_w``."""
    a = adapter.store[f"{layer}.A_{which}"].detach()
    b = adapter.store[f"{layer}.B_{which}"].detach()
    sv = torch.linalg.svdvals(a @ b)
    kept = [float(s) for s in sv if s > threshold]
    return RankReport(rank=len(kept), singular_values=kept, threshold=threshold)
