"""Command implementations: dataset generation, training, generation, benchmarking, end-to-end checks."""
from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .attention import CONDITIONAL, JOINT, MUTUAL
from .branches import SPATIAL, SUBJECT, read_pnm, write_pnm
from .cila import LoraAdapter, OpCounters
from .config import ConfigError, RunConfig, split_condition
from .data import make_samples, read_dataset, write_dataset
from .kvcache import SamplerSchedule, generate, sample_latent
from .model import DiT, Condition, Sample, evaluation_loss, train_stage1, train_stage2
from .numerics import dtype_for

log = logging.getLogger(__name__)

BASE_FILE = "base.ditb"


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(loss)])


def sampler_mode(n_conditions: int, no_mutual: bool = False) -> str:
    """Mask used at inference: conditional for one block, mutual (or joint for the ablation) for more."""
    if n_conditions == 1:
        return CONDITIONAL
    return JOINT if no_mutual else MUTUAL


# -- commands -------------------------------------------------------------------

def cmd_gen_data(task: str, n: int, seed: int, out_dir) -> Path:
    model_cfg = RunConfig().model_config()
    samples = make_samples(task, n, seed, model_cfg.image_size, model_cfg.cond_size)
    return write_dataset(samples, out_dir)


def cmd_train(cfg: RunConfig) -> dict[str, Path]:
    """Stage ``base`` trains and writes a checkpoint; stage ``lora`` writes only an adapter file."""
    if cfg.stage not in ("base", "lora"):
        raise ConfigError(f"stage must be base or lora, got {cfg.stage!r}")
    cfg.check_paths(dataset=True, checkpoint=cfg.stage == "lora")
    samples = read_dataset(cfg.dataset)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = dtype_for(cfg.precision)
    if cfg.stage == "base":
        model = DiT(cfg.model_config(), seed=cfg.seed, dtype=dtype)
        losses = train_stage1(model, samples, cfg.steps, cfg.lr, cfg.seed)
        ckpt = out / BASE_FILE
        model.save(ckpt)
        csv_path = out / "loss_base.csv"
        write_loss_csv(csv_path, losses)
        return {"checkpoint": ckpt, "losses": csv_path}
    model = DiT.load(cfg.checkpoint, dtype=dtype)
    adapter, losses = train_stage2(model, cfg.kind, samples, cfg.steps, cfg.lr, cfg.seed)
    ad_path = out / f"{cfg.kind}.cila"
    adapter.save(ad_path)
    csv_path = out / f"loss_{cfg.kind}.csv"
    write_loss_csv(csv_path, losses)
    return {"adapter": ad_path, "losses": csv_path}


def load_conditions(cfg: RunConfig) -> tuple[list[Condition], list[LoraAdapter]]:
    """Pair each ``kind:path`` condition with the adapter at the same position."""
    conds = []
    for entry in cfg.conditions:
        kind, path = split_condition(entry)
        if kind not in (SPATIAL, SUBJECT):
            raise ConfigError(f"unknown condition kind {kind!r}")
        conds.append(Condition(kind, read_pnm(path)))
    if len(cfg.adapters) != len(conds):
        raise ConfigError(f"{len(cfg.adapters)} adapters for {len(conds)} conditions")
    adapters = [LoraAdapter.load(p, dtype_for(cfg.precision)) for p in cfg.adapters]
    for c, ad, p in zip(conds, adapters, cfg.adapters):
        if ad.kind != c.kind:
            raise ConfigError(f"adapter {p} is {ad.kind} but its condition is {c.kind}")
    return conds, adapters


def cmd_generate(cfg: RunConfig) -> Path:
    cfg.check_paths(checkpoint=True, adapters=True, conditions=True)
    model = DiT.load(cfg.checkpoint, dtype=dtype_for(cfg.precision))
    conds, adapters = load_conditions(cfg)
    for ad in adapters:
        if ad.d_model != model.config.d_model or ad.n_layers != model.config.layers:
            raise ConfigError("adapter shape does not match the base checkpoint")
    img = generate(model, cfg.prompt, conds, adapters, seed=cfg.seed, schedule=SamplerSchedule(cfg.T),
                   use_cache=not cfg.no_cache, mode=sampler_mode(len(conds), cfg.no_mutual))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sample_seed{cfg.seed}.pgm"
    write_pnm(path, img)
    return path


# -- benchmark ------------------------------------------------------------------

@dataclass
class BenchRun:
    conditions: int
    cached: bool
    ms: float
    cond_qkv: int
    attention_rows: int


@dataclass
class BenchReport:
    steps: int
    runs: list[BenchRun] = field(default_factory=list)

    def median_ms(self, conditions: int, cached: bool) -> float:
        return statistics.median(r.ms for r in self.runs if r.conditions == conditions and r.cached == cached)

    def counts(self, conditions: int, cached: bool) -> tuple[int, int]:
        r = next(r for r in self.runs if r.conditions == conditions and r.cached == cached)
        return r.cond_qkv, r.attention_rows

    def speedup(self, conditions: int) -> float:
        """Uncached over cached median wall-clock."""
        return self.median_ms(conditions, False) / self.median_ms(conditions, True)

    def multi_over_single(self, cached: bool) -> float:
        return self.median_ms(2, cached) / self.median_ms(1, cached)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["conditions", "cached", "ms", "cond_qkv", "attention_rows"])
            for r in self.runs:
                w.writerow([r.conditions, int(r.cached), f"{r.ms:.3f}", r.cond_qkv, r.attention_rows])

    def summary(self) -> list[str]:
        lines = []
        for n in sorted({r.conditions for r in self.runs}):
            c, u = self.counts(n, True), self.counts(n, False)
            lines.append(
                f"{n} condition(s), T={self.steps}: cached {self.median_ms(n, True):.1f} ms, "
                f"uncached {self.median_ms(n, False):.1f} ms, speedup {self.speedup(n):.3f}; "
                f"condition QKV {c[0]} vs {u[0]}; attention rows {c[1]} vs {u[1]}"
            )
        if {1, 2} <= {r.conditions for r in self.runs}:
            lines.append(f"2/1 condition cost: cached {self.multi_over_single(True):.3f}, "
                         f"uncached {self.multi_over_single(False):.3f}")
        return lines


def bench_conditions(model: DiT) -> list[Condition]:
    """One spatial and one subject condition from the synthetic generators."""
    cfg = model.config
    spatial = make_samples(SPATIAL, 1, 0, cfg.image_size, cfg.cond_size)[0]
    subject = make_samples(SUBJECT, 1, 0, cfg.image_size, cfg.cond_size)[0]
    return [Condition(SPATIAL, spatial.condition), Condition(SUBJECT, subject.condition)]


def run_bench(model: DiT, adapters: list[LoraAdapter], conditions: list[Condition], steps: int = 25,
              repeats: int = 5, counts=(1, 2), prompt=(0, 3)) -> BenchReport:
    """Median-of-``repeats`` timings after one warm-up per configuration; cached and uncached interleave."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    sched = SamplerSchedule(steps)
    report = BenchReport(steps)
    for n in counts:
        conds, ads = conditions[:n], adapters[:n]
        mode = sampler_mode(n)
        for cached in (True, False):
            sample_latent(model, list(prompt), conds, ads, schedule=sched, use_cache=cached, mode=mode)
        for _ in range(repeats):
            for cached in (True, False):
                counters = OpCounters()
                t0 = time.perf_counter()
                sample_latent(model, list(prompt), conds, ads, schedule=sched, use_cache=cached, mode=mode,
                              counters=counters)
                ms = (time.perf_counter() - t0) * 1e3
                report.runs.append(BenchRun(n, cached, ms, counters.cond_qkv, counters.attention_rows))
    return report


def cmd_bench(cfg: RunConfig) -> BenchReport:
    cfg.check_paths(checkpoint=True, adapters=True)
    model = DiT.load(cfg.checkpoint, dtype=dtype_for(cfg.precision))
    conditions = bench_conditions(model)
    by_kind = {}
    for p in cfg.adapters:
        ad = LoraAdapter.load(p, model.dtype)
        by_kind[ad.kind] = ad
    # timings do not depend on adapter values; fill missing kinds with fresh adapters
    adapters = [by_kind.get(c.kind) or model.new_adapter(c.kind, cfg.seed) for c in conditions]
    report = run_bench(model, adapters, conditions, cfg.T, cfg.repeats, prompt=tuple(cfg.prompt))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv")
    return report


# -- end-to-end learning signal -------------------------------------------------

@dataclass
class LearningReport:
    stage1_initial: float
    stage1_final: float
    stage2_initial: float
    stage2_final: float
    mse_conditioned: float
    mse_unconditioned: float
    seconds: float
    stage1_losses: list[float] = field(repr=False, default_factory=list)
    stage2_losses: list[float] = field(repr=False, default_factory=list)

    @property
    def stage1_ratio(self) -> float:
        return self.stage1_final / self.stage1_initial

    @property
    def stage2_ratio(self) -> float:
        return self.stage2_final / self.stage2_initial


def image_mse(a, b) -> float:
    return float(((a.pixels - b.pixels) ** 2).mean())


def generation_mse(model: DiT, samples: list[Sample], adapter: LoraAdapter | None, kind: str = SPATIAL,
                   steps: int = 25, seed: int = 0) -> float:
    """Mean pixel MSE of generated images against the held-out targets."""
    total = 0.0
    for i, s in enumerate(samples):
        conds = [Condition(kind, s.condition)] if adapter is not None else []
        ads = [adapter] if adapter is not None else []
        img = generate(model, s.prompt, conds, ads, seed=seed + i, schedule=SamplerSchedule(steps))
        total += image_mse(img, s.target)
    return total / len(samples)


def learning_signal(n_train: int = 64, n_test: int = 16, stage1_steps: int = 2000, stage2_steps: int = 4000,
                    lr1: float = 1e-3, lr2: float = 1e-3, seed: int = 0, model: DiT | None = None,
                    ) -> tuple[LearningReport, DiT, LoraAdapter]:
    """Train base then spatial adapter on the synthetic spatial task; score losses and generations."""
    t0 = time.perf_counter()
    train = make_samples(SPATIAL, n_train, seed)
    test = make_samples(SPATIAL, n_test, seed + 1)
    model = model or DiT(seed=seed)
    i1 = evaluation_loss(model, train)
    l1 = train_stage1(model, train, stage1_steps, lr1, seed)
    f1 = evaluation_loss(model, train)
    log.info("stage 1: %.4f -> %.4f", i1, f1)
    adapter = model.new_adapter(SPATIAL, seed)
    i2 = evaluation_loss(model, train, SPATIAL, adapter)
    adapter, l2 = train_stage2(model, SPATIAL, train, stage2_steps, lr2, seed, adapter=adapter)
    f2 = evaluation_loss(model, train, SPATIAL, adapter)
    log.info("stage 2: %.4f -> %.4f", i2, f2)
    mse_c = generation_mse(model, test, adapter)
    mse_u = generation_mse(model, test, None)
    report = LearningReport(i1, f1, i2, f2, mse_c, mse_u, time.perf_counter() - t0, l1, l2)
    return report, model, adapter


# -- zero-shot composition ------------------------------------------------------

@dataclass
class CompositionReport:
    seeds: int
    all_finite: bool
    leak_to_denoise: float  # max probability from condition queries to text/noise keys
    leak_cross: float       # max probability between distinct condition blocks
    perturbation: float     # max change of protected condition K/V under perturbed inputs
    ablation_diff: float    # max |mutual - joint| over final images


def _condition_kv(model: DiT, z, t, prompt, conds, adapters, mode):
    seq = model.assemble(z, prompt, conds)
    _, kvs = model.forward_sequence(seq, t, adapters, mode, keep_kv=True)
    slices = seq.layout.block_slices()
    return [[(k[s], v[s]) for s in slices] for k, v in kvs]


def _kv_diff(a, b, blocks) -> float:
    worst = 0.0
    for la, lb in zip(a, b):
        for i in blocks:
            for x, y in zip(la[i], lb[i]):
                worst = max(worst, float((x - y).abs().max()))
    return worst


def composition_check(model: DiT, conditions: list[Condition], adapters: list[LoraAdapter], seeds=range(5),
                      prompt=(0, 3), steps: int = 25) -> CompositionReport:
    """Jointly load independently trained adapters and check mutual-mask isolation on the real model."""
    prompt = list(prompt)
    sched = SamplerSchedule(steps)
    finite, ablation = True, 0.0
    for seed in seeds:
        mutual = generate(model, prompt, conditions, adapters, seed=seed, schedule=sched, mode=MUTUAL)
        joint = generate(model, prompt, conditions, adapters, seed=seed, schedule=sched, mode=JOINT)
        finite &= bool(torch.isfinite(mutual.pixels).all()) and bool(torch.isfinite(joint.pixels).all())
        ablation = max(ablation, float((mutual.pixels - joint.pixels).abs().max()))

    g = torch.Generator().manual_seed(99)
    cfg = model.config
    leak_d = leak_c = perturb = 0.0
    with torch.no_grad():
        for trial in range(len(seeds)):
            z = torch.randn(cfg.n_noise, cfg.patch_dim, generator=g, dtype=model.dtype)
            t = float(torch.rand((), generator=g))
            seq = model.assemble(z, prompt, conditions)
            probe: list = []
            model.forward_sequence(seq, t, adapters, MUTUAL, probe=probe)
            layout = seq.layout
            nd = layout.n_denoise
            ids = layout.block_ids()
            cross = (ids[:, None] >= 0) & (ids[None, :] >= 0) & (ids[:, None] != ids[None, :])
            for probs in probe:
                leak_d = max(leak_d, float(probs[:, nd:, :nd].abs().max()))
                leak_c = max(leak_c, float(probs[:, cross].abs().max()))

            ref = _condition_kv(model, z, t, prompt, conditions, adapters, MUTUAL)
            # new noise, timestep and prompt: no condition K/V may move
            z2 = torch.randn(z.shape, generator=g, dtype=model.dtype)
            other = _condition_kv(model, z2, 1.0 - t, prompt[::-1] + [1], conditions, adapters, MUTUAL)
            perturb = max(perturb, _kv_diff(ref, other, range(len(conditions))))
            # replace one condition image: every other block's K/V must stay bitwise equal
            for b, c in enumerate(conditions):
                swapped = list(conditions)
                swapped[b] = Condition(c.kind, type(c.image)(torch.rand(c.image.pixels.shape, generator=g,
                                                                         dtype=c.image.pixels.dtype)))
                moved = _condition_kv(model, z, t, prompt, swapped, adapters, MUTUAL)
                keep = [i for i in range(len(conditions)) if i != b]
                perturb = max(perturb, _kv_diff(ref, moved, keep))
    return CompositionReport(len(seeds), finite, leak_d, leak_c, perturb, ablation)
