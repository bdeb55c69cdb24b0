"""Hierarchical tokenizer: any supported scale in, a fixed latent stack out.

Encoding runs in two stages. A per-patch encoder attends pixel tokens and n
learnable query tokens under the pixels-and-latents rule, producing n ordered
latent levels per patch regardless of how many pixels the patch holds at the
input scale. A grid encoder then mixes latents across patches under the
level-causal rule, so level i of any patch is a function of levels <= i only.

Decoding mirrors it: a grid decoder (level-causal), then a per-patch decoder
that attends one shared learnable pixel embedding replicated to the target
patch pixel count, disambiguated purely by rotary positions, under the
latents-to-pixels rule. The same latents therefore decode to any scale whose
grid matches.

Per-patch level budgets deactivate the trailing levels everywhere; encoding
with budget m is bitwise identical to full encoding truncated to m levels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, psnr as psnr_metric, resize_corner_aligned
from .geometry import (
    PatchGeometry,
    ScaleSpec,
    level_major_positions,
    patch_sizes,
    patchifier_positions,
    rope_tables,
)
from .masks import (
    LevelBudget,
    TokenLayout,
    build_lca_mask_batch,
    build_lca_step_mask,
    build_lpa_mask_batch,
    build_pla_mask_batch,
)
from .tensor import Tensor, concat, mul, no_grad, reshape, transpose


@dataclass(frozen=True)
class TokenizerConfig:
    k: int = 16
    k_t: int = 1
    n: int = 4
    latent_dim: int = 16
    patch_hidden: int = 64
    patch_heads: int = 4
    patch_layers: int = 2
    grid_hidden: int = 128
    grid_heads: int = 4
    grid_layers: int = 3
    ffn_ratio: float = 2.0
    temporal_causal: bool = True

    def __post_init__(self):
        for dim, heads, name in ((self.patch_hidden, self.patch_heads, "patch"),
                                 (self.grid_hidden, self.grid_heads, "grid")):
            if dim % heads != 0:
                raise ValueError(f"{name}_hidden {dim} not divisible by heads {heads}")
            if (dim // heads) % 8 != 0:
                raise ValueError(f"{name} head dim {dim // heads} must be a multiple of 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(**d)


@dataclass
class LatentGrid:
    """Latent stack for one sample: (T', H', W', n, d) with entries above the
    per-patch budget forced to zero."""

    values: np.ndarray
    budget: LevelBudget

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 5:
            raise ValueError(f"values must be (T', H', W', n, d), got {v.shape}")
        P = v.shape[0] * v.shape[1] * v.shape[2]
        if self.budget.num_patches != P:
            raise ValueError(f"budget covers {self.budget.num_patches} patches, grid has {P}")
        if self.budget.n != v.shape[3]:
            raise ValueError(f"budget n={self.budget.n} but grid holds {v.shape[3]} levels")
        lvl = np.arange(1, v.shape[3] + 1)
        act = lvl[None, :] <= self.budget.per_patch[:, None]  # (P, n)
        v = v * act.reshape(v.shape[:4])[..., None].astype(v.dtype)
        self.values = v

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    @property
    def n(self) -> int:
        return self.values.shape[3]

    @property
    def d(self) -> int:
        return self.values.shape[4]

    @property
    def num_patches(self) -> int:
        t, h, w = self.grid
        return t * h * w

    def tokens(self) -> np.ndarray:
        """Level-major token view: (n * P, d), token (lvl-1)*P + patch."""
        T, H, W, n, d = self.values.shape
        return np.ascontiguousarray(
            self.values.reshape(T * H * W, n, d).transpose(1, 0, 2).reshape(n * T * H * W, d))

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, grid: tuple[int, int, int],
                    budget: LevelBudget) -> "LatentGrid":
        T, H, W = grid
        P = T * H * W
        n = tokens.shape[0] // P
        vals = tokens.reshape(n, P, -1).transpose(1, 0, 2).reshape(T, H, W, n, -1)
        return cls(vals, budget)

    def with_budget(self, budget: LevelBudget | int) -> "LatentGrid":
        if isinstance(budget, int):
            budget = LevelBudget.uniform(self.n, self.num_patches, budget)
        merged = np.minimum(self.budget.per_patch, budget.per_patch)
        return LatentGrid(self.values.copy(), LevelBudget(self.n, merged))


def _patchify(pixels: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """(B, t, h, w, 3) -> (B * P, pixels_per_patch, 3), patch-major t, y, x;
    pixel order inside a patch is (t, y, x)-major to match the position table."""
    B, t, h, w, c = pixels.shape
    T, H, W = geom.grid
    x = pixels.reshape(B, T, geom.p_t, H, geom.p_hw, W, geom.p_hw, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return np.ascontiguousarray(x).reshape(B * T * H * W, geom.pixels_per_patch, c)


def _unpatchify_t(tokens: Tensor, geom: PatchGeometry, batch: int) -> Tensor:
    """(B * P, pixels_per_patch, 3) Tensor -> (B, t, h, w, 3) Tensor."""
    T, H, W = geom.grid
    x = reshape(tokens, (batch, T, H, W, geom.p_t, geom.p_hw, geom.p_hw, 3))
    x = transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return reshape(x, (batch, T * geom.p_t, H * geom.p_hw, W * geom.p_hw, 3))


class Tokenizer:
    """Scale-crossing autoencoder over hierarchical latent levels."""

    def __init__(self, config: TokenizerConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        c = config
        store = nn.ParamStore(seed=seed, dtype=dtype)
        self.store = store
        dp, dg = c.patch_hidden, c.grid_hidden
        self.pix_in = nn.Linear(store, "enc.pix_in", 3, dp)
        self.queries = store.param("enc.queries", (c.n, dp), init="normal")
        self.enc_patch = [nn.Block(store, f"enc.patch.{i}", dp, c.patch_heads, c.ffn_ratio)
                          for i in range(c.patch_layers)]
        self.enc_proj = nn.Linear(store, "enc.proj", dp, dg)
        self.enc_grid = [nn.Block(store, f"enc.grid.{i}", dg, c.grid_heads, c.ffn_ratio)
                         for i in range(c.grid_layers)]
        self.enc_norm = nn.RMSNorm(store, "enc.out_norm", dg)
        self.enc_head = nn.Linear(store, "enc.head", dg, c.latent_dim)
        self.dec_in = nn.Linear(store, "dec.in", c.latent_dim, dg)
        self.dec_grid = [nn.Block(store, f"dec.grid.{i}", dg, c.grid_heads, c.ffn_ratio)
                         for i in range(c.grid_layers)]
        self.dec_proj = nn.Linear(store, "dec.proj", dg, dp)
        self.pix_query = store.param("dec.pix_query", (1, dp), init="normal")
        self.dec_patch = [nn.Block(store, f"dec.patch.{i}", dp, c.patch_heads, c.ffn_ratio)
                          for i in range(c.patch_layers)]
        self.dec_norm = nn.RMSNorm(store, "dec.out_norm", dp)
        self.pix_out = nn.Linear(store, "dec.pix_out", dp, 3)
        self._rope_cache: dict = {}

    # -- plumbing -----------------------------------------------------------
    def geometry_for(self, scale: ScaleSpec) -> PatchGeometry:
        return patch_sizes(scale, self.config.k, self.config.k_t)

    def _patch_rope(self, geom: PatchGeometry, heads_dim: int):
        key = ("patch", geom.p_t, geom.p_hw, heads_dim)
        if key not in self._rope_cache:
            table = patchifier_positions(geom, self.config.n)
            self._rope_cache[key] = rope_tables(table, heads_dim)
        return self._rope_cache[key]

    def _grid_rope(self, grid: tuple[int, int, int], heads_dim: int):
        key = ("grid", grid, heads_dim)
        if key not in self._rope_cache:
            table = level_major_positions(grid, self.config.n)
            self._rope_cache[key] = rope_tables(table, heads_dim)
        return self._rope_cache[key]

    def _temporal(self, grid: tuple[int, int, int]) -> bool:
        return self.config.temporal_causal and grid[0] > 1

    # -- encode -------------------------------------------------------------
    def encode_t(self, pixels: np.ndarray, scale: ScaleSpec,
                 budgets: np.ndarray) -> tuple[Tensor, PatchGeometry]:
        """Batched graph-building encode.

        pixels: (B, t, h, w, 3) float32; budgets: (B, P) ints in [1, n].
        Returns level-major latents (B, n*P, d) with deactivated levels zeroed.
        """
        c = self.config
        geom = self.geometry_for(scale)
        P = geom.num_patches
        B = pixels.shape[0]
        budgets = np.asarray(budgets)
        if budgets.shape != (B, P):
            raise ValueError(f"budgets must be ({B}, {P}), got {budgets.shape}")

        dt = self.store.dtype
        flat = _patchify(pixels.astype(dt, copy=False), geom)
        h = self.pix_in(Tensor(flat))  # (B*P, L_pix, dp)
        q = self.queries + Tensor(np.zeros((B * P, c.n, c.patch_hidden), dtype=dt))
        toks = concat([h, q], axis=1)

        layout = TokenLayout.for_patch(geom.pixels_per_patch, c.n)
        allow = build_pla_mask_batch(layout, budgets.reshape(-1))
        rope = self._patch_rope(geom, c.patch_hidden // c.patch_heads)
        for blk in self.enc_patch:
            toks = blk(toks, allow, rope)

        lat = toks[:, geom.pixels_per_patch:, :]  # (B*P, n, dp)
        lat = self.enc_proj(lat)
        lat = reshape(lat, (B, P, c.n, c.grid_hidden))
        lat = reshape(transpose(lat, (0, 2, 1, 3)), (B, c.n * P, c.grid_hidden))

        glayout = TokenLayout.for_grid(geom.grid, c.n)
        gallow = build_lca_mask_batch(glayout, budgets, self._temporal(geom.grid))
        grope = self._grid_rope(geom.grid, c.grid_hidden // c.grid_heads)
        for blk in self.enc_grid:
            lat = blk(lat, gallow, grope)

        out = self.enc_head(self.enc_norm(lat))  # (B, n*P, d)
        act = (glayout.level[None, :] <= budgets[:, glayout.patch]).astype(dt)
        out = mul(out, Tensor(act[:, :, None]))
        return out, geom

    # -- decode -------------------------------------------------------------
    def _decode_grid_t(self, tokens: Tensor, budgets: np.ndarray,
                       grid: tuple[int, int, int]) -> Tensor:
        """Level-causal grid stage of the decoder: (B, n*P, d) -> (B, n*P, dg)."""
        c = self.config
        h = self.dec_in(tokens)
        glayout = TokenLayout.for_grid(grid, c.n)
        gallow = build_lca_mask_batch(glayout, np.asarray(budgets), self._temporal(grid))
        grope = self._grid_rope(grid, c.grid_hidden // c.grid_heads)
        for blk in self.dec_grid:
            h = blk(h, gallow, grope)
        return h

    def decoder_grid_cache(self) -> list:
        """Per-block empty K/V for incremental grid-stage decoding."""
        c = self.config
        dh = c.grid_hidden // c.grid_heads
        return [(np.zeros((1, c.grid_heads, 0, dh), np.float32),
                 np.zeros((1, c.grid_heads, 0, dh), np.float32)) for _ in self.dec_grid]

    def decoder_grid_rows(self, new_tokens: np.ndarray, level: int,
                          grid: tuple[int, int, int], cache: list,
                          kv_sink: list | None = None) -> np.ndarray:
        """Grid-stage output for one new level given cached lower-level K/V.

        new_tokens: (P, d) latents of `level`; cache holds per-block rotated
        keys/values of levels 1..level-1. Each block runs one softmax over
        [cached, new] keys, so the rows match the joint forward. When kv_sink
        is a list, this level's (k, v) pairs are appended per block.
        """
        c = self.config
        T, H, W = grid
        P = T * H * W
        cos, sin = self._grid_rope(grid, c.grid_hidden // c.grid_heads)
        rope_new = (cos[(level - 1) * P: level * P], sin[(level - 1) * P: level * P])
        q_layout = TokenLayout(kind=np.ones(P, int), patch=np.arange(P),
                               level=np.full(P, level),
                               segment=np.repeat(np.arange(T), H * W))
        k_layout = TokenLayout.for_grid(grid, level)
        allow = build_lca_step_mask(q_layout, k_layout, self._temporal(grid)).allow
        with no_grad():
            h = self.dec_in(Tensor(new_tokens[None]))
            for blk, past in zip(self.dec_grid, cache):
                sink = [] if kv_sink is not None else None
                h = blk(h, allow, rope_new, past_kv=past, kv_sink=sink)
                if kv_sink is not None:
                    kv_sink.append(sink[0])
        return h.data[0]

    def decode_t(self, tokens: Tensor, grid: tuple[int, int, int],
                 budgets: np.ndarray, target: ScaleSpec) -> Tensor:
        """Batched graph-building decode of level-major latents.

        tokens: (B, n*P, d); budgets: (B, P). Target must tile to the same
        patch grid as the latents (same aspect ratio and duration).
        """
        c = self.config
        geom = self.geometry_for(target)
        if geom.grid != tuple(grid):
            raise ValueError(
                f"target scale tiles to grid {geom.grid}, latents hold {tuple(grid)}; "
                f"aspect ratio or duration does not match")
        P = geom.num_patches
        B = tokens.shape[0]
        budgets = np.asarray(budgets)

        h = self._decode_grid_t(tokens, budgets, geom.grid)  # (B, n*P, dg)

        h = reshape(h, (B, c.n, P, c.grid_hidden))
        h = reshape(transpose(h, (0, 2, 1, 3)), (B * P, c.n, c.grid_hidden))
        lat = self.dec_proj(h)  # (B*P, n, dp)

        L_pix = geom.pixels_per_patch
        pix = self.pix_query + Tensor(np.zeros((B * P, L_pix, c.patch_hidden),
                                               dtype=self.store.dtype))
        toks = concat([pix, lat], axis=1)

        layout = TokenLayout.for_patch(L_pix, c.n)
        allow = build_lpa_mask_batch(layout, budgets.reshape(-1))
        rope = self._patch_rope(geom, c.patch_hidden // c.patch_heads)
        for blk in self.dec_patch:
            toks = blk(toks, allow, rope)

        out = self.pix_out(self.dec_norm(toks[:, :L_pix, :]))  # (B*P, L_pix, 3)
        return _unpatchify_t(out, geom, B)

    # -- public single-sample API --------------------------------------------
    def encode(self, sample: Sample, budget: LevelBudget | int | None = None) -> LatentGrid:
        geom = self.geometry_for(sample.scale)
        if budget is None:
            budget = LevelBudget.uniform(self.config.n, geom.num_patches)
        elif isinstance(budget, int):
            budget = LevelBudget.uniform(self.config.n, geom.num_patches, budget)
        if budget.num_patches != geom.num_patches:
            raise ValueError(f"budget covers {budget.num_patches} patches, "
                             f"scale needs {geom.num_patches}")
        with no_grad():
            toks, _ = self.encode_t(sample.pixels[None], sample.scale,
                                    budget.per_patch[None])
        return LatentGrid.from_tokens(toks.data[0], geom.grid, budget)

    def decode(self, latents: LatentGrid, target: ScaleSpec) -> Sample:
        with no_grad():
            out = self.decode_t(Tensor(latents.tokens()[None]), latents.grid,
                                latents.budget.per_patch[None], target)
        return Sample(np.clip(out.data[0], 0.0, 1.0), target)

    def reconstruct(self, sample: Sample, target: ScaleSpec | None = None,
                    budget: LevelBudget | int | None = None) -> tuple[Sample, float]:
        """encode then decode; PSNR is against the input (resampled with
        corner alignment when the target scale differs spatially)."""
        target = target or sample.scale
        out = self.decode(self.encode(sample, budget), target)
        ref = sample.pixels
        if (target.h, target.w) != (sample.scale.h, sample.scale.w):
            ref = resize_corner_aligned(ref, target.h, target.w)
        if ref.shape != out.pixels.shape:
            raise ValueError(f"cannot compare scales {sample.scale} -> {target}")
        return out, psnr_metric(out.pixels, ref)

    # -- persistence ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, "tokenizer", self.config.to_dict(),
                        {k: v.astype(np.float32) for k, v in self.store.state_arrays().items()})

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        kind, config, arrays = load_checkpoint(path)
        if kind != "tokenizer":
            raise ValueError(f"checkpoint at {path} holds a {kind!r}, not a tokenizer")
        model = cls(TokenizerConfig.from_dict(config))
        model.store.load_arrays(arrays)
        return model
