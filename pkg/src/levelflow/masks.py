"""Attention rules over mixed pixel/latent token layouts.

Three rules, all derived from the same per-token descriptors:

  pixels-and-latents (patch encoder): pixel tokens attend pixels only;
  latent level i attends all pixels plus latents of level <= i.

  latents-to-pixels (patch decoder): pixel tokens attend pixels and every
  active latent; latent level i attends latents of level <= i, no pixels.

  level-causal (grid encoder/decoder/generator): token (patch p, level i,
  segment s) attends (p', i', s') iff i' <= i, and s' <= s when temporal
  causality is on.

A per-patch level budget deactivates levels above it: deactivated tokens are
blocked as queries and as keys, which together with the exact-zero masked
softmax makes them invisible to every active token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import AttnMask

PIXEL = 0
LATENT = 1


@dataclass(frozen=True)
class LevelBudget:
    """Active level count per patch, each in [1, n]."""

    n: int
    per_patch: np.ndarray  # (P,) int

    def __post_init__(self):
        arr = np.asarray(self.per_patch, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("per_patch must be 1-D")
        if arr.size and (arr.min() < 1 or arr.max() > self.n):
            raise ValueError(f"budgets must lie in [1, {self.n}], got range "
                             f"[{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "per_patch", arr)

    @classmethod
    def uniform(cls, n: int, num_patches: int, m: int | None = None) -> "LevelBudget":
        return cls(n, np.full(num_patches, n if m is None else m))

    @property
    def num_patches(self) -> int:
        return self.per_patch.size

    def mean(self) -> float:
        return float(self.per_patch.mean())


@dataclass(frozen=True)
class TokenLayout:
    """Per-token descriptors; masks are pure functions of these arrays."""

    kind: np.ndarray     # (L,) uint8, PIXEL or LATENT
    patch: np.ndarray    # (L,) int, patch index
    level: np.ndarray    # (L,) int, 1-based for latents, 0 for pixels
    segment: np.ndarray  # (L,) int, temporal patch index

    def __post_init__(self):
        for name in ("kind", "patch", "level", "segment"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        L = self.kind.size
        if not all(getattr(self, f).size == L for f in ("patch", "level", "segment")):
            raise ValueError("descriptor arrays must share one length")

    def __len__(self):
        return self.kind.size

    @classmethod
    def for_patch(cls, num_pixels: int, n: int, patch: int = 0, segment: int = 0) -> "TokenLayout":
        """One patch's tokens: pixels first, then latent levels 1..n."""
        L = num_pixels + n
        return cls(
            kind=np.concatenate([np.zeros(num_pixels, int), np.ones(n, int)]),
            patch=np.full(L, patch),
            level=np.concatenate([np.zeros(num_pixels, int), np.arange(1, n + 1)]),
            segment=np.full(L, segment),
        )

    @classmethod
    def for_grid(cls, grid: tuple[int, int, int], n: int) -> "TokenLayout":
        """All latent tokens of a grid, level-major: index = (lvl-1)*P + patch."""
        T, H, W = grid
        P = T * H * W
        seg_per_patch = np.repeat(np.arange(T), H * W)
        return cls(
            kind=np.ones(n * P, int),
            patch=np.tile(np.arange(P), n),
            level=np.repeat(np.arange(1, n + 1), P),
            segment=np.tile(seg_per_patch, n),
        )


def _budget_per_token(layout: TokenLayout, budget: LevelBudget | int) -> np.ndarray:
    if isinstance(budget, LevelBudget):
        return budget.per_patch[layout.patch]
    return np.full(len(layout), int(budget))


def active_tokens(layout: TokenLayout, budget: LevelBudget | int) -> np.ndarray:
    """Boolean activity: pixels always, latents iff level <= patch budget."""
    b = _budget_per_token(layout, budget)
    return (layout.kind == PIXEL) | (layout.level <= b)


def build_pla_mask(layout: TokenLayout, budget: LevelBudget | int) -> AttnMask:
    """Patch-encoder rule: pixels see pixels; latent level i sees all pixels
    and latents of level <= i. Deactivated latents see and serve nothing."""
    act = active_tokens(layout, budget)
    pix = layout.kind == PIXEL
    lat = ~pix
    lvl = layout.level
    q_pix, k_pix = pix[:, None], pix[None, :]
    q_lat = (lat & act)[:, None]
    k_lat_ok = (lat & act)[None, :] & (lvl[None, :] <= lvl[:, None])
    allow = (q_pix & k_pix) | (q_lat & (k_pix | k_lat_ok))
    return AttnMask(allow)


def build_lpa_mask(layout: TokenLayout, budget: LevelBudget | int) -> AttnMask:
    """Patch-decoder rule: pixels see pixels plus every active latent;
    latent level i sees latents of level <= i only."""
    act = active_tokens(layout, budget)
    pix = layout.kind == PIXEL
    lat = ~pix
    lvl = layout.level
    k_act_lat = (lat & act)[None, :]
    q_pix = pix[:, None]
    q_lat = (lat & act)[:, None]
    allow = (q_pix & (pix[None, :] | k_act_lat)) | \
            (q_lat & k_act_lat & (lvl[None, :] <= lvl[:, None]))
    return AttnMask(allow)


def build_lca_mask(layout: TokenLayout, budget: LevelBudget | int,
                   temporal_causal: bool = False) -> AttnMask:
    """Level-causal rule over latent tokens, optionally also causal over
    temporal segments."""
    act = active_tokens(layout, budget)
    lvl = layout.level
    allow = act[:, None] & act[None, :] & (lvl[None, :] <= lvl[:, None])
    if temporal_causal:
        allow &= layout.segment[None, :] <= layout.segment[:, None]
    return AttnMask(allow)


def build_lca_step_mask(q_layout: TokenLayout, k_layout: TokenLayout,
                        temporal_causal: bool = False) -> AttnMask:
    """Rectangular level-causal mask for incremental generation: queries are
    the tokens being refined, keys are [finalized tokens, queries]. Budgets
    are already resolved by construction of the layouts."""
    allow = k_layout.level[None, :] <= q_layout.level[:, None]
    if temporal_causal:
        allow &= k_layout.segment[None, :] <= q_layout.segment[:, None]
    return AttnMask(allow)


def build_pla_mask_batch(layout: TokenLayout, budgets: np.ndarray) -> np.ndarray:
    """Per-patch encoder masks for a batch of scalar budgets: (B,) -> (B, 1, L, L)."""
    n = int(layout.level.max()) if len(layout) else 0
    stack = np.stack([build_pla_mask(layout, m).allow for m in range(1, n + 1)])
    return stack[np.asarray(budgets) - 1][:, None]


def build_lpa_mask_batch(layout: TokenLayout, budgets: np.ndarray) -> np.ndarray:
    """Per-patch decoder masks for a batch of scalar budgets: (B,) -> (B, 1, L, L)."""
    n = int(layout.level.max()) if len(layout) else 0
    stack = np.stack([build_lpa_mask(layout, m).allow for m in range(1, n + 1)])
    return stack[np.asarray(budgets) - 1][:, None]


def build_lca_mask_batch(layout: TokenLayout, budgets: np.ndarray,
                         temporal_causal: bool = False) -> np.ndarray:
    """Level-causal masks for per-sample per-patch budgets: (B, P) -> (B, 1, L, L)."""
    budgets = np.asarray(budgets)
    b_tok = budgets[:, layout.patch]  # (B, L)
    act = layout.level[None, :] <= b_tok
    lvl_ok = layout.level[None, :] <= layout.level[:, None]
    if temporal_causal:
        lvl_ok = lvl_ok & (layout.segment[None, :] <= layout.segment[:, None])
    allow = act[:, :, None] & act[:, None, :] & lvl_ok[None]
    return allow[:, None]


def compact(layout: TokenLayout, budget: LevelBudget | int) -> tuple[TokenLayout, np.ndarray]:
    """Drop deactivated tokens. Returns the compacted layout plus the index
    map: keep[i] is the original position of compacted token i, so any mask
    rebuilt on the compacted layout equals allow[np.ix_(keep, keep)]."""
    keep = np.nonzero(active_tokens(layout, budget))[0]
    sub = TokenLayout(kind=layout.kind[keep], patch=layout.patch[keep],
                      level=layout.level[keep], segment=layout.segment[keep])
    return sub, keep


def assert_active_rows_covered(mask: AttnMask, active: np.ndarray):
    """Every active query row must keep at least one key."""
    rows = mask.allow.any(axis=1)
    bad = np.nonzero(active & ~rows)[0]
    if bad.size:
        raise AssertionError(f"active rows with no allowed key: {bad.tolist()}")


def to_pbm(mask: AttnMask) -> bytes:
    """Plain PBM (P1) dump; 1 marks an allowed pair. For debugging."""
    h, w = mask.allow.shape
    rows = [" ".join("1" if v else "0" for v in row) for row in mask.allow]
    return (f"P1\n{w} {h}\n" + "\n".join(rows) + "\n").encode()


def from_pbm(data: bytes) -> AttnMask:
    toks = data.decode().split()
    if toks[0] != "P1":
        raise ValueError("not a plain PBM")
    w, h = int(toks[1]), int(toks[2])
    bits = np.array(toks[3:3 + w * h], dtype=np.int64).reshape(h, w)
    return AttnMask(bits.astype(bool))
