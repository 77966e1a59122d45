"""Token-space plumbing: images, patches, toy encoders and branch assembly."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .numerics import DEFAULT_DTYPE, ShapeError
from .rope import PositionGrid, interpolate_positions, offset_positions, scale_factors

SPATIAL = "spatial"
SUBJECT = "subject"
KINDS = (SPATIAL, SUBJECT)


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ToyImage:
    """``channels x height x width`` pixels in ``[0, 1]``."""

    pixels: torch.Tensor

    def __post_init__(self):
        if self.pixels.dim() != 3 or self.pixels.shape[0] not in (1, 3):
            raise ShapeError(f"image must be (1|3, H, W), got {tuple(self.pixels.shape)}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def gray(cls, array) -> "ToyImage":
        return cls(torch.as_tensor(np.asarray(array), dtype=DEFAULT_DTYPE)[None])


@dataclass(frozen=True)
class BranchLayout:
    n_text: int
    n_noise: int
    condition_blocks: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.n_text < 0 or self.n_noise < 0:
            raise LayoutError("token counts must be non-negative")
        for kind, count in self.condition_blocks:
            if kind not in KINDS:
                raise LayoutError(f"unknown condition kind {kind!r}")
            if count < 0:
                raise LayoutError("token counts must be non-negative")

    @property
    def n_denoise(self) -> int:
        return self.n_text + self.n_noise

    @property
    def total(self) -> int:
        return self.n_denoise + sum(c for _, c in self.condition_blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.condition_blocks)

    def block_slices(self) -> list[slice]:
        out, start = [], self.n_denoise
        for _, count in self.condition_blocks:
            out.append(slice(start, start + count))
            start += count
        return out

    def block_ids(self) -> torch.Tensor:
        """Per token: -1 for text/noise, else the condition block index."""
        ids = [-1] * self.n_denoise
        for b, (_, count) in enumerate(self.condition_blocks):
            ids.extend([b] * count)
        return torch.tensor(ids, dtype=torch.long)

    def block_of(self, i: int) -> int:
        if not 0 <= i < self.total:
            raise IndexError(f"token index {i} outside layout of {self.total}")
        if i < self.n_denoise:
            return -1
        for b, s in enumerate(self.block_slices()):
            if s.start <= i < s.stop:
                return b
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class ConditionTokens:
    """One embedded condition ready for assembly.

    ``resized`` is the condition's patch grid after resizing; ``original`` is
    the patch-grid size of the canvas it describes.
    """

    kind: str
    tokens: torch.Tensor
    resized: tuple[int, int]
    original: tuple[int, int]


@dataclass(frozen=True)
class BranchedSequence:
    features: torch.Tensor
    layout: BranchLayout
    positions: PositionGrid

    def __post_init__(self):
        n = self.layout.total
        if self.features.shape[0] != n or len(self.positions) != n:
            raise LayoutError(
                f"features ({self.features.shape[0]}), layout ({n}) and positions "
                f"({len(self.positions)}) disagree"
            )

    def denoise_features(self) -> torch.Tensor:
        return self.features[: self.layout.n_denoise]

    def block_features(self, b: int) -> torch.Tensor:
        return self.features[self.layout.block_slices()[b]]


def patch_tokens(img: ToyImage, p: int) -> tuple[torch.Tensor, PositionGrid]:
    """Flatten non-overlapping ``p x p`` patches, row-major, as ``(py, px, c)`` vectors."""
    C, H, W = img.pixels.shape
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
    x = img.pixels.reshape(C, H // p, p, W // p, p).permute(1, 3, 2, 4, 0)
    tokens = x.reshape((H // p) * (W // p), p * p * C)
    return tokens, interpolate_positions(H // p, W // p)


def patchify(img: ToyImage, p: int, embedding: torch.Tensor | None = None,
             bias: torch.Tensor | None = None) -> tuple[torch.Tensor, PositionGrid]:
    tokens, grid = patch_tokens(img, p)
    if embedding is not None:
        tokens = tokens.to(embedding.dtype) @ embedding
        if bias is not None:
            tokens = tokens + bias
    return tokens, grid


def unpatchify(tokens: torch.Tensor, p: int, channels: int, height: int, width: int) -> ToyImage:
    gh, gw = height // p, width // p
    if tokens.shape != (gh * gw, p * p * channels):
        raise ShapeError(f"cannot unpatchify {tuple(tokens.shape)} into {channels}x{height}x{width}")
    x = tokens.reshape(gh, gw, p, p, channels).permute(4, 0, 2, 1, 3)
    return ToyImage(x.reshape(channels, height, width))


def _area_weights(src: int, dst: int) -> torch.Tensor:
    # (dst, src) matrix of overlap fractions between output cells and input pixels
    w = torch.zeros(dst, src, dtype=torch.float64)
    scale = src / dst
    for o in range(dst):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                w[o, i] = overlap / scale
    return w


def resize_condition(img: ToyImage, H_target: int, W_target: int) -> ToyImage:
    """Area-average downsampling to exactly ``H_target x W_target``."""
    if H_target <= 0 or W_target <= 0:
        raise ValueError("target size must be positive")
    if H_target > img.height or W_target > img.width:
        raise ValueError(f"cannot upscale {img.height}x{img.width} to {H_target}x{W_target}")
    if (H_target, W_target) == (img.height, img.width):
        return img
    rh = _area_weights(img.height, H_target).to(img.pixels.dtype)
    rw = _area_weights(img.width, W_target).to(img.pixels.dtype)
    return ToyImage(rh @ img.pixels @ rw.T)


def encode_text(prompt_ids, table: torch.Tensor) -> torch.Tensor:
    ids = list(prompt_ids)
    vocab = table.shape[0]
    for i in ids:
        if not 0 <= int(i) < vocab:
            raise ValueError(f"prompt id {i} outside vocabulary of {vocab}")
    if not ids:
        return table[:0]
    return table[torch.tensor(ids, dtype=torch.long)]


def condition_positions(conditions: list[ConditionTokens], delta_h: float) -> list[PositionGrid]:
    grids, k = [], 0
    for cond in conditions:
        H, W = cond.resized
        if cond.kind == SPATIAL:
            S_h, S_w = scale_factors(*cond.original, H, W)
            grids.append(interpolate_positions(H, W, S_h, S_w))
        else:
            k += 1
            grids.append(offset_positions(interpolate_positions(H, W), k, delta_h))
    return grids


def assemble(text_tokens: torch.Tensor, noise_tokens: torch.Tensor, noise_grid: PositionGrid,
             conditions: list[ConditionTokens] = (), delta_h: float = 64.0) -> BranchedSequence:
    """Concatenate ``[text; noise; c_1; ...; c_m]`` and attach positions.

    Text sits at ``(0, 0)``; spatial conditions get interpolated coordinates
    on the canvas they describe; the k-th subject condition is shifted down
    by ``k * delta_h`` rows.
    """
    conditions = list(conditions)
    d = noise_tokens.shape[1]
    if text_tokens.shape[1] != d:
        raise ShapeError(f"text width {text_tokens.shape[1]} != noise width {d}")
    if len(noise_grid) != noise_tokens.shape[0]:
        raise ShapeError("noise grid length does not match noise tokens")
    for cond in conditions:
        if cond.kind not in KINDS:
            raise LayoutError(f"unknown condition kind {cond.kind!r}")
        if cond.tokens.shape[1] != d:
            raise ShapeError(f"{cond.kind} condition width {cond.tokens.shape[1]} != {d}")
        if cond.tokens.shape[0] != cond.resized[0] * cond.resized[1]:
            raise ShapeError("condition token count does not match its patch grid")
    layout = BranchLayout(
        text_tokens.shape[0], noise_tokens.shape[0],
        tuple((c.kind, c.tokens.shape[0]) for c in conditions),
    )
    features = torch.cat([text_tokens, noise_tokens] + [c.tokens for c in conditions], dim=0)
    positions = PositionGrid.concat(
        [PositionGrid.zeros(text_tokens.shape[0]), noise_grid] + condition_positions(conditions, delta_h)
    )
    return BranchedSequence(features, layout, positions)


# --- PGM / PPM (binary, 8-bit) -------------------------------------------------

def write_pnm(path, img: ToyImage) -> None:
    data = np.clip(np.rint(img.pixels.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    body = data[0] if img.channels == 1 else np.transpose(data, (1, 2, 0))
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    Path(path).write_bytes(header + body.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> ToyImage:
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, mv = int(width), int(height), int(maxval)
    if mv != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=pos)
    if channels == 1:
        arr = raw.reshape(1, h, w)
    else:
        arr = raw.reshape(h, w, 3).transpose(2, 0, 1)
    return ToyImage(torch.tensor(arr / 255.0, dtype=DEFAULT_DTYPE))
