"""Synthetic paired datasets and the on-disk manifest format.

A dataset directory holds PGM files plus ``manifest.txt`` with one line per
sample: ``<comma-separated prompt ids> <condition path|-> <target path>``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .branches import SPATIAL, SUBJECT, ToyImage, read_pnm, resize_condition, write_pnm
from .model import Sample

PALETTE = (0.0, 1.0)
N_POLYGONS = 5
N_LOCATIONS = 4
GLYPH = 8
MANIFEST = "manifest.txt"


def _polygon(rng: np.random.Generator, size: int) -> np.ndarray:
    n_vertices = int(rng.integers(3, 6))
    center = rng.uniform(0.15, 0.85, size=2) * size
    radius = rng.uniform(0.06, 0.15) * size
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
    pts = center + radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = np.ones((size, size), dtype=bool)
    # convex polygon with counter-clockwise vertices in (row, col): keep one side of every edge
    for a, b in zip(pts, np.roll(pts, -1, axis=0)):
        cross = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
        inside &= cross <= 0
    return inside


def polygon_mask(rng: np.random.Generator, size: int, n: int = N_POLYGONS) -> np.ndarray:
    """Union of ``n`` small random convex polygons.

    Scattered shapes make the layout the main unknown for an unconditional
    model, which is what a spatial condition resolves.
    """
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        mask |= _polygon(rng, size)
    return mask


def edge_map(target: np.ndarray) -> np.ndarray:
    """1 where any 4-neighbour has a different value, else 0."""
    e = np.zeros(target.shape, dtype=bool)
    e[1:, :] |= target[1:, :] != target[:-1, :]
    e[:-1, :] |= target[:-1, :] != target[1:, :]
    e[:, 1:] |= target[:, 1:] != target[:, :-1]
    e[:, :-1] |= target[:, :-1] != target[:, 1:]
    return e.astype(np.float64)


def spatial_condition(target: ToyImage, cond_size: int) -> ToyImage:
    edges = ToyImage.gray(edge_map(target.pixels[0].numpy()))
    return resize_condition(edges, cond_size, cond_size)


def spatial_sample(rng: np.random.Generator, size: int = 32, cond_size: int = 16) -> Sample:
    fg, bg = rng.choice(len(PALETTE), size=2, replace=False)
    mask = polygon_mask(rng, size)
    while mask.sum() < size:  # degenerate slivers
        mask = polygon_mask(rng, size)
    pixels = np.where(mask, PALETTE[fg], PALETTE[bg])
    target = ToyImage.gray(pixels)
    return Sample([int(fg), len(PALETTE) + int(bg)], target, spatial_condition(target, cond_size))


def glyph_location(location: int, size: int) -> tuple[int, int]:
    half = size // 2
    return (location // 2) * half + (half - GLYPH) // 2, (location % 2) * half + (half - GLYPH) // 2


def subject_sample(rng: np.random.Generator, size: int = 32, cond_size: int = 16) -> Sample:
    glyph = rng.random((GLYPH, GLYPH)) < 0.5
    glyph[0, :] = glyph[-1, :] = glyph[:, 0] = glyph[:, -1] = True  # framed so it reads as one object
    location = int(rng.integers(N_LOCATIONS))
    target = np.zeros((size, size))
    r, c = glyph_location(location, size)
    target[r:r + GLYPH, c:c + GLYPH] = glyph
    cond = np.zeros((cond_size, cond_size))
    o = (cond_size - GLYPH) // 2
    cond[o:o + GLYPH, o:o + GLYPH] = glyph
    return Sample([8 + location], ToyImage.gray(target), ToyImage.gray(cond))


def make_samples(task: str, n: int, seed: int, size: int = 32, cond_size: int = 16) -> list[Sample]:
    rng = np.random.default_rng(seed)
    if task == SPATIAL:
        return [spatial_sample(rng, size, cond_size) for _ in range(n)]
    if task == SUBJECT:
        return [subject_sample(rng, size, cond_size) for _ in range(n)]
    raise ValueError(f"unknown task {task!r}")


def write_dataset(samples: list[Sample], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        target = f"target_{i:04d}.pgm"
        write_pnm(out / target, s.target)
        cond = "-"
        if s.condition is not None:
            cond = f"cond_{i:04d}.pgm"
            write_pnm(out / cond, s.condition)
        lines.append(f"{','.join(str(t) for t in s.prompt)} {cond} {target}\n")
    (out / MANIFEST).write_text("".join(lines))
    return out / MANIFEST


def read_dataset(path) -> list[Sample]:
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    root = manifest.parent
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected '<prompt ids> <condition|-> <target>'")
        ids, cond, target = parts
        prompt = [int(t) for t in ids.split(",") if t]
        condition = None if cond == "-" else read_pnm(root / cond)
        samples.append(Sample(prompt, read_pnm(root / target), condition))
    return samples
