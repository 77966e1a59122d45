"""Desk-scale branched conditional diffusion transformer.

Condition tokens run through the shared base with low-rank Q/K/V deltas,
never read the denoising branch, and so have K/V that can be cached once
per generation.
"""
from .branches import SPATIAL, SUBJECT, BranchLayout, ToyImage, read_pnm, write_pnm
from .cila import LoraAdapter, OpCounters
from .kvcache import KvCache, SamplerSchedule, generate, sample_latent
from .model import DiT, Condition, ModelConfig, Sample, train_stage1, train_stage2

__all__ = [
    "SPATIAL", "SUBJECT", "BranchLayout", "ToyImage", "read_pnm", "write_pnm", "LoraAdapter", "OpCounters",
    "KvCache", "SamplerSchedule", "generate", "sample_latent", "DiT", "Condition", "ModelConfig", "Sample",
    "train_stage1", "train_stage2",
]
