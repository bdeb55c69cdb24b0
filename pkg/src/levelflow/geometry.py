"""Scale-aware patch geometry and token positions.

A scale is a concrete (height, width, fps, frames) tuple; content identity
lives in the patch grid, which depends only on aspect ratio and duration.
The spatial patch edge is min(h, w) / k so the shorter image side always
carries exactly k patches, and the temporal patch covers f / k_t frames so
one second always carries k_t patches.

Position conventions; every coordinate is resolution-independent:
  - intra-patch spatial: corner-aligned, j / (p - 1), so patch corners sit at
    {0, 1}^2 at every scale (single-pixel edge gets 0.5)
  - intra-patch temporal: tail-aligned, (j + 1) / p_t, so the last frame of a
    patch is always 1 and a single-frame patch gets 1
  - inter-patch: shorter spatial side spans [0, 1], longer spans
    [0, longer/shorter]; temporal tail-aligned (s + 1) / T'
  - level: the integer level index itself, 1-based

Rotary tables split each head's channel pairs into four groups, one per
coordinate (t, y, x, level); a zero coordinate means the group applies no
rotation, so e.g. pixel tokens are untouched in the level group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import Tensor

ROPE_GROUPS = ("t", "y", "x", "level")


class GeometryError(ValueError):
    """A requested scale does not tile into whole patches."""


@dataclass(frozen=True)
class ScaleSpec:
    """Concrete data scale. Images are single-frame videos: f = t = 1."""

    h: int
    w: int
    f: int = 1
    t: int = 1

    def __post_init__(self):
        for name in ("h", "w", "f", "t"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"ScaleSpec.{name} must be a positive integer, got {v!r}")

    @property
    def is_image(self) -> bool:
        return self.t == 1

    @property
    def duration(self) -> float:
        return self.t / self.f

    def aspect(self) -> tuple[int, int]:
        g = np.gcd(self.h, self.w)
        return (self.h // g, self.w // g)


@dataclass(frozen=True)
class PatchGeometry:
    """Patch tiling of one scale: sizes in pixels/frames plus the grid."""

    k: int
    k_t: int
    p_hw: int
    p_t: int
    grid: tuple[int, int, int]  # (T', H', W')

    @property
    def num_patches(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def pixels_per_patch(self) -> int:
        return self.p_t * self.p_hw * self.p_hw


def patch_sizes(scale: ScaleSpec, k: int, k_t: int = 1) -> PatchGeometry:
    """Compute patch sizes for a scale; raises GeometryError with the
    required multiple when the scale does not divide evenly."""
    if k < 1 or k_t < 1:
        raise ValueError("k and k_t must be >= 1")
    short = min(scale.h, scale.w)
    if short % k != 0:
        raise GeometryError(
            f"min(h, w) = {short} must be a multiple of k = {k}")
    p_hw = short // k
    if scale.h % p_hw != 0:
        raise GeometryError(
            f"height {scale.h} must be a multiple of the patch size {p_hw}")
    if scale.w % p_hw != 0:
        raise GeometryError(
            f"width {scale.w} must be a multiple of the patch size {p_hw}")
    if scale.f % k_t != 0:
        raise GeometryError(
            f"frame rate {scale.f} must be a multiple of k_t = {k_t}")
    p_t = scale.f // k_t
    if scale.t % p_t != 0:
        raise GeometryError(
            f"frame count {scale.t} must be a multiple of the temporal patch size {p_t}")
    grid = (scale.t // p_t, scale.h // p_hw, scale.w // p_hw)
    return PatchGeometry(k=k, k_t=k_t, p_hw=p_hw, p_t=p_t, grid=grid)


@dataclass(frozen=True)
class PositionTable:
    """Per-token rotary coordinates, one row per token, columns ROPE_GROUPS."""

    coords: np.ndarray  # (L, 4) float64

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != len(ROPE_GROUPS):
            raise ValueError(f"coords must be (L, {len(ROPE_GROUPS)})")
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return self.coords.shape[0]

    def concat(self, other: "PositionTable") -> "PositionTable":
        return PositionTable(np.concatenate([self.coords, other.coords], axis=0))


def _corner_axis(p: int) -> np.ndarray:
    # single sample sits mid-range; otherwise endpoints land exactly on 0, 1
    if p == 1:
        return np.array([0.5])
    return np.arange(p) / (p - 1)


def _tail_axis(p: int) -> np.ndarray:
    return np.arange(1, p + 1) / p


def intra_patch_positions(geom: PatchGeometry) -> PositionTable:
    """Pixel-token coordinates inside one patch, (t, y, x)-major order.

    Spatial corners sit exactly on {0,1}^2 and temporal positions are
    tail-aligned so the same physical instant/location gets the same
    coordinate at every scale.
    """
    ts = _tail_axis(geom.p_t)
    ys = _corner_axis(geom.p_hw)
    xs = _corner_axis(geom.p_hw)
    tt, yy, xx = np.meshgrid(ts, ys, xs, indexing="ij")
    L = geom.pixels_per_patch
    coords = np.zeros((L, 4))
    coords[:, 0] = tt.ravel()
    coords[:, 1] = yy.ravel()
    coords[:, 2] = xx.ravel()
    return PositionTable(coords)


def latent_level_positions(n: int) -> PositionTable:
    """Coordinates of the n latent tokens of one patch: only the level axis."""
    coords = np.zeros((n, 4))
    coords[:, 3] = np.arange(1, n + 1)
    return PositionTable(coords)


def inter_patch_positions(grid: tuple[int, int, int]) -> np.ndarray:
    """Per-patch (t, y, x) coordinates, shape (T'*H'*W', 3), t-major.

    The shorter spatial side spans [0, 1]; the longer spans [0, ratio].
    Depends only on the grid, hence only on aspect ratio and duration.
    """
    T, H, W = grid
    short = min(H, W)
    ys = _corner_axis(H) * (H / short) if H > 1 else _corner_axis(H)
    xs = _corner_axis(W) * (W / short) if W > 1 else _corner_axis(W)
    ts = _tail_axis(T)
    tt, yy, xx = np.meshgrid(ts, ys, xs, indexing="ij")
    return np.stack([tt.ravel(), yy.ravel(), xx.ravel()], axis=1)


def level_major_positions(grid: tuple[int, int, int], n: int) -> PositionTable:
    """Token table for a full latent grid laid out level-major:
    token index = (level - 1) * P + patch, levels 1..n."""
    patch = inter_patch_positions(grid)  # (P, 3)
    P = patch.shape[0]
    coords = np.zeros((n * P, 4))
    coords[:, :3] = np.tile(patch, (n, 1))
    coords[:, 3] = np.repeat(np.arange(1, n + 1), P)
    return PositionTable(coords)


def patchifier_positions(geom: PatchGeometry, n: int) -> PositionTable:
    """Pixel tokens followed by the n latent query tokens of one patch."""
    return intra_patch_positions(geom).concat(latent_level_positions(n))


def rope_tables(table: PositionTable, head_dim: int,
                base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Angle tables (cos, sin), each (L, head_dim/2), float64.

    head_dim must be divisible by 2 * len(ROPE_GROUPS): each group owns an
    equal contiguous run of channel pairs with its own frequency ladder.
    """
    G = len(ROPE_GROUPS)
    if head_dim % (2 * G) != 0:
        raise ValueError(
            f"head_dim {head_dim} must be a multiple of {2 * G} "
            f"(2 x {G} coordinate groups)")
    slots = head_dim // (2 * G)
    freqs = base ** (-np.arange(slots) / slots)  # (slots,)
    angles = np.einsum("lg,s->lgs", table.coords, freqs).reshape(len(table), G * slots)
    return np.cos(angles), np.sin(angles)


def rope_rotate(x: Tensor, table: PositionTable, base: float = 10000.0) -> Tensor:
    """Rotate per-head channels of x (..., L, head_dim) by the table angles."""
    cos, sin = rope_tables(table, x.shape[-1], base)
    return nn.apply_rope(x, cos, sin)
