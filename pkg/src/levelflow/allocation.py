"""Entropy-guided per-patch level allocation.

Patch luma entropy stands in for visual complexity. A target mean level
count is spread across patches by an iterative rescale-and-round loop that
is rank-monotone (higher entropy never receives fewer levels) and ends with
a hard guarantee: every count in [m, M] and the mean at or below the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample, psnr
from .geometry import PatchGeometry
from .masks import LevelBudget

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class EntropyMap:
    """Per-patch Shannon entropy in bits, flat in (t, y, x) patch order."""

    values: np.ndarray  # (P,) float64
    grid: tuple[int, int, int]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "grid", tuple(self.grid))
        T, H, W = self.grid
        if vals.shape != (T * H * W,):
            raise ValueError(f"{vals.shape[0]} entropies for grid {self.grid}")
        if vals.size and (vals.min() < 0.0 or vals.max() > 8.0):
            raise ValueError("8-bit histogram entropy must lie in [0, 8] bits")


@dataclass(frozen=True)
class AllocationParams:
    """Target mean n within [m, M], plus the adjustment-loop constants."""

    n: float = 2.0
    m: int = 1
    M: int = 3
    K: int = 10
    theta1: float = 0.995
    theta2: float = 0.999

    def __post_init__(self):
        if not self.m <= self.n <= self.M:
            raise ValueError(f"need m <= n <= M, got {self.m} <= {self.n} <= {self.M}")
        if self.m < 1:
            raise ValueError("minimum level count m must be at least 1")
        for name, th in (("theta1", self.theta1), ("theta2", self.theta2)):
            if not 0.0 < th < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {th}")
        if self.K < 1:
            raise ValueError("K must be at least 1")

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "M": self.M, "K": self.K,
                "theta1": self.theta1, "theta2": self.theta2}


@dataclass(frozen=True)
class AllocationGrid:
    """Integer level count per patch; mean(counts) <= target by construction."""

    counts: np.ndarray  # (P,) int64
    grid: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        object.__setattr__(self, "grid", tuple(self.grid))

    def mean(self) -> float:
        return float(self.counts.mean())

    def as_grid(self) -> np.ndarray:
        return self.counts.reshape(self.grid)

    def as_budget(self, n_levels: int) -> LevelBudget:
        return LevelBudget(n_levels, self.counts)


def _luma_bins(pixels: np.ndarray) -> np.ndarray:
    """(..., 3) RGB in [0, 1] -> 8-bit luma codes."""
    luma = pixels @ np.asarray(LUMA, dtype=np.float64)
    return np.clip(np.rint(luma * 255.0), 0, 255).astype(np.uint8)


def patch_entropy(image: Sample, geom: PatchGeometry) -> EntropyMap:
    """256-bin Shannon entropy of each patch's 8-bit luma values."""
    t, h, w, _ = image.pixels.shape
    T, H, W = geom.grid
    if (t, h, w) != (T * geom.p_t, H * geom.p_hw, W * geom.p_hw):
        raise ValueError(f"geometry {geom.grid} x ({geom.p_t}, {geom.p_hw}) "
                         f"does not tile pixels ({t}, {h}, {w})")
    codes = _luma_bins(image.pixels)
    patches = (codes.reshape(T, geom.p_t, H, geom.p_hw, W, geom.p_hw)
               .transpose(0, 2, 4, 1, 3, 5)
               .reshape(T * H * W, -1))
    out = np.zeros(patches.shape[0])
    for i, patch in enumerate(patches):
        counts = np.bincount(patch, minlength=256)
        p = counts[counts > 0] / patch.size
        out[i] = float(-(p * np.log2(p)).sum())
    return EntropyMap(out, geom.grid)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _normalize(e: np.ndarray, m: float, M: float) -> np.ndarray:
    lo, hi = float(e.min()), float(e.max())
    if hi == lo:
        return np.full_like(e, (m + M) / 2.0)
    return m + (e - lo) * (M - m) / (hi - lo)


def allocate(entropy: EntropyMap, params: AllocationParams = AllocationParams()
             ) -> AllocationGrid:
    """Spread the target mean across patches by entropy rank.

    Weights start as the affine map of the entropy range onto [m, M]
    (degenerate range: midpoint everywhere). K adjustment rounds rescale the
    weights toward the target rounded mean, keep the best iterate, and damp
    by theta1 whenever the estimate overshoots. The best iterate is then
    rounded half-away-from-zero, clamped, and shrunk by theta2 until the
    mean respects the target. All scalings are positive scalars, so the
    entropy ordering survives into the counts.
    """
    n, m, M = params.n, params.m, params.M
    w = _normalize(entropy.values, m, M)
    w_best = w
    for _ in range(params.K):
        n_hat = _round_half_away(w).mean()
        if n_hat > 0:  # all-zero rounding is unreachable for valid params
            w = (n / n_hat) * w
        n_new = _round_half_away(w).mean()
        n_best = _round_half_away(w_best).mean()
        if abs(n_new - n) < abs(n_best - n):
            w_best = w
        if n_new > n:
            w = params.theta1 * w
    counts = np.clip(_round_half_away(w_best), m, M)
    while counts.mean() > n:
        w_best = params.theta2 * w_best
        counts = np.clip(_round_half_away(w_best), m, M)
    return AllocationGrid(counts.astype(np.int64), entropy.grid)


def allocate_for(image: Sample, geom: PatchGeometry,
                 params: AllocationParams = AllocationParams()) -> AllocationGrid:
    return allocate(patch_entropy(image, geom), params)


def allocation_rd_report(tokenizer, images: list[Sample],
                         params: AllocationParams = AllocationParams()) -> dict:
    """Reconstruction quality, uniform versus entropy-guided budgets.

    The uniform arm spends round(n) levels on every patch; the guided arm
    spends the allocated counts. Both arms decode at the input scale.
    """
    if not images:
        raise ValueError("rd report needs at least one image")
    uniform_m = int(round(params.n))
    if params.M > tokenizer.config.n:
        raise ValueError(f"bound M={params.M} exceeds the tokenizer's "
                         f"{tokenizer.config.n} levels")
    uni, guided, means = [], [], []
    for img in images:
        geom = tokenizer.geometry_for(img.scale)
        _, p_u = tokenizer.reconstruct(img, budget=uniform_m)
        grid = allocate_for(img, geom, params)
        _, p_g = tokenizer.reconstruct(img, budget=grid.as_budget(tokenizer.config.n))
        uni.append(p_u)
        guided.append(p_g)
        means.append(grid.mean())
    return {
        "images": len(images),
        "uniform_budget": uniform_m,
        "uniform_psnr": float(np.mean(uni)),
        "allocated_psnr": float(np.mean(guided)),
        "delta_db": float(np.mean(guided) - np.mean(uni)),
        "mean_levels": float(np.mean(means)),
        "params": params.to_dict(),
    }
