"""2D rotary position encoding, position-aware interpolation and PE offset."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import DEFAULT_DTYPE, ShapeError


@dataclass(frozen=True)
class PositionGrid:
    """Per-token ``(row, col)`` coordinates in original-image patch units."""

    coords: torch.Tensor  # (n, 2) float64

    def __post_init__(self):
        if self.coords.dim() != 2 or self.coords.shape[1] != 2:
            raise ShapeError(f"position grid must be (n, 2), got {tuple(self.coords.shape)}")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def tolist(self) -> list[tuple[float, float]]:
        return [(float(r), float(c)) for r, c in self.coords.tolist()]

    @classmethod
    def from_list(cls, pairs) -> "PositionGrid":
        return cls(torch.tensor(list(pairs), dtype=torch.float64).reshape(-1, 2))

    @classmethod
    def zeros(cls, n: int) -> "PositionGrid":
        return cls(torch.zeros(n, 2, dtype=torch.float64))

    @staticmethod
    def concat(grids: list["PositionGrid"]) -> "PositionGrid":
        if not grids:
            return PositionGrid.zeros(0)
        return PositionGrid(torch.cat([g.coords for g in grids], dim=0))


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base_frequency: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4:
            raise ValueError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")

    @property
    def axis_dim(self) -> int:
        return self.head_dim // 2

    def frequencies(self, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        # theta_f = base^(-2f / axis_dim), one per channel pair of an axis
        f = torch.arange(self.axis_dim // 2, dtype=torch.float64)
        return (self.base_frequency ** (-2.0 * f / self.axis_dim)).to(dtype)


def scale_factors(M: int, N: int, H: int, W: int) -> tuple[float, float]:
    """Ratio of original to resized size along height and width."""
    if H <= 0 or W <= 0:
        raise ValueError(f"target dimensions must be positive, got H={H}, W={W}")
    if M <= 0 or N <= 0:
        raise ValueError(f"original dimensions must be positive, got M={M}, N={N}")
    return M / H, N / W


def interpolate_positions(H: int, W: int, S_h: float = 1.0, S_w: float = 1.0) -> PositionGrid:
    """Row-major grid ``(i * S_h, j * S_w)`` for a resized ``H x W`` patch grid."""
    rows = torch.arange(H, dtype=torch.float64) * S_h
    cols = torch.arange(W, dtype=torch.float64) * S_w
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return PositionGrid(torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=1))


def offset_positions(grid: PositionGrid, k: int = 1, delta_h: float = 64.0) -> PositionGrid:
    """Shift every row coordinate by ``k * delta_h``; columns untouched."""
    if k < 1:
        raise ValueError(f"subject-condition index starts at 1, got {k}")
    if delta_h < 0:
        raise ValueError(f"delta_h must be non-negative, got {delta_h}")
    shift = torch.tensor([k * delta_h, 0.0], dtype=torch.float64)
    return PositionGrid(grid.coords + shift)


def rope_angles(grid: PositionGrid, params: RopeParams, dtype=DEFAULT_DTYPE) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape ``(n, head_dim // 2)``, one entry per channel pair.

    The first ``head_dim // 4`` pairs follow the row coordinate, the rest the
    column coordinate.
    """
    freqs = params.frequencies(torch.float64)
    coords = grid.coords.to(torch.float64)
    ang = torch.cat([coords[:, :1] * freqs, coords[:, 1:] * freqs], dim=1)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rotation(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive channel pairs of ``x (..., n, head_dim)``."""
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack([out_even, out_odd], dim=-1).flatten(-2)


def rope_rotate(features: torch.Tensor, grid: PositionGrid, params: RopeParams) -> torch.Tensor:
    """Apply 2D RoPE to ``features`` of shape ``(tokens, head_dim)`` or ``(heads, tokens, head_dim)``."""
    if features.shape[-1] != params.head_dim:
        raise ShapeError(f"feature width {features.shape[-1]} != head_dim {params.head_dim}")
    if features.shape[-2] != len(grid):
        raise ShapeError(f"{features.shape[-2]} tokens but {len(grid)} positions")
    cos, sin = rope_angles(grid, params, features.dtype)
    return apply_rotation(features, cos, sin)
