"""Rectified-flow transformer over hierarchical latent levels.

The velocity network runs level-causal attention over level-major latent
tokens, with per-level timesteps: each level can sit at its own point on the
noise-to-data path. That makes two sampling modes consistent by construction:

  one-shot: every level follows the same Euler trajectory jointly; level i
  never attends above itself, so its result is independent of higher levels.

  refine: levels are generated one at a time. Finalized levels are fed at
  their clean values with a clean timestep; their per-block keys/values are
  computed once and cached, and each new level's queries attend the
  concatenation of cached and new keys under one softmax, which is exactly
  the joint computation restricted to the new rows.

Sampling is deterministic given a seed. Initial noise is drawn from a
per-level stream (seed, level), so the level-1 latents of a 1-level run and
a 4-level run with the same seed are bitwise identical, whichever mode
produced them.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import level_major_positions, rope_tables
from .masks import (
    LevelBudget,
    TokenLayout,
    build_lca_mask,
    build_lca_mask_batch,
    build_lca_step_mask,
)
from .tensor import Tensor, embedding, mul, no_grad, reduce_sum, reshape
from .tokenizer import LatentGrid


@dataclass(frozen=True)
class DiTConfig:
    hidden: int = 128
    heads: int = 4
    layers: int = 6
    latent_dim: int = 16
    n: int = 4
    num_classes: int = 4
    cross_attention: bool = False
    ffn_ratio: float = 2.0
    temporal_causal: bool = True
    cfg_scale: float = 6.0
    cfg_interval: float = 0.1
    steps: int = 50
    time_shift: float = 1.0
    dir_loss_weight: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 8 != 0:
            raise ValueError(f"head dim {self.hidden // self.heads} must be a multiple of 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        return cls(**d)

    @property
    def null_class(self) -> int:
        return self.num_classes


def time_grid(steps: int, shift: float = 1.0) -> np.ndarray:
    """Euler timesteps from 1 to 0 inclusive; shift > 1 spends more of the
    budget near the noise end. shift = 1 is the uniform grid."""
    u = 1.0 - np.arange(steps + 1) / steps
    return shift * u / (1.0 + (shift - 1.0) * u)


def euler_trajectory(v_fn: Callable[[np.ndarray, float], np.ndarray],
                     x: np.ndarray, steps: int, shift: float = 1.0) -> np.ndarray:
    """Integrate dx/dt = v(x, t) from t=1 down to t=0 with explicit Euler.
    The state keeps its dtype; step sizes are cast to it."""
    ts = time_grid(steps, shift)
    x = x.copy()
    for k in range(steps):
        v = v_fn(x, float(ts[k]))
        x = x + x.dtype.type(ts[k + 1] - ts[k]) * v
    return x


class DiT:
    """Velocity network over level-major latent tokens."""

    def __init__(self, config: DiTConfig, seed: int = 0):
        self.config = config
        c = config
        store = nn.ParamStore(seed=seed)
        self.store = store
        H = c.hidden
        self.x_in = nn.Linear(store, "dit.x_in", c.latent_dim, H)
        # one extra row serves as the unconditional (null) class
        self.class_emb = store.param("dit.class_emb", (c.num_classes + 1, H), init="normal")
        self.t_in = nn.Linear(store, "dit.t_in", H, H)
        self.t_out = nn.Linear(store, "dit.t_out", H, H)
        self.blocks = [nn.ModulatedBlock(store, f"dit.block.{i}", H, c.heads,
                                         c.ffn_ratio, cross=c.cross_attention)
                       for i in range(c.layers)]
        self.final_mod = nn.Linear(store, "dit.final_mod", H, 2 * H, zero_init=True)
        self.final_norm = nn.RMSNorm(store, "dit.final_norm", H)
        self.x_out = nn.Linear(store, "dit.x_out", H, c.latent_dim, zero_init=True)
        self._rope_cache: dict = {}

    # -- shared pieces -------------------------------------------------------
    def _grid_rope(self, grid: tuple[int, int, int], m: int):
        key = (grid, m)
        if key not in self._rope_cache:
            table = level_major_positions(grid, m)
            self._rope_cache[key] = rope_tables(table, self.config.hidden // self.config.heads)
        return self._rope_cache[key]

    def _temporal(self, grid) -> bool:
        return self.config.temporal_causal and grid[0] > 1

    def _cond_tokens(self, t_levels: np.ndarray, class_ids: np.ndarray,
                     P: int) -> tuple[Tensor, Tensor]:
        """Per-token conditioning (B, m*P, H) plus the class context (B, 1, H).

        t_levels: (B, m) times in [0, 1]; class_ids: (B,) with null allowed.
        """
        c = self.config
        B, m = t_levels.shape
        temb = nn.timestep_embedding(t_levels, c.hidden)  # (B, m, H)
        tfeat = self.t_out(nn.silu(self.t_in(Tensor(temb))))
        cls = embedding(self.class_emb, np.asarray(class_ids))  # (B, H)
        cls = reshape(cls, (B, 1, c.hidden))
        cond = tfeat + cls  # (B, m, H)
        # broadcast each level's vector over its P tokens (level-major)
        cond = reshape(cond, (B, m, 1, c.hidden)) + Tensor(
            np.zeros((B, m, P, c.hidden), dtype=np.float32))
        return reshape(cond, (B, m * P, c.hidden)), cls

    # -- training forward ------------------------------------------------------
    def velocity_t(self, x: Tensor, t_levels: np.ndarray, class_ids: np.ndarray,
                   budgets: np.ndarray, grid: tuple[int, int, int]) -> Tensor:
        """Batched graph-building velocity.

        x: (B, m*P, d) level-major noisy tokens (m = levels present);
        t_levels: (B, m); budgets: (B,) shared per sample. Output rows of
        levels above a sample's budget are zero.
        """
        c = self.config
        B, L, _ = x.shape
        T, Hg, Wg = grid
        P = T * Hg * Wg
        m = L // P
        budgets = np.asarray(budgets)
        per_patch = np.repeat(budgets[:, None], P, axis=1)
        layout = TokenLayout.for_grid(grid, m)
        allow = build_lca_mask_batch(layout, per_patch, self._temporal(grid))
        rope = self._grid_rope(grid, m)
        cond, cls = self._cond_tokens(t_levels, class_ids, P)
        h = self.x_in(x)
        for blk in self.blocks:
            h = blk(h, cond, allow, rope, ctx=cls)
        fm = self.final_mod(nn.silu(cond))
        shift, scale = fm[..., :c.hidden], fm[..., c.hidden:]
        out = self.x_out(nn.modulate(self.final_norm(h), shift, scale))
        act = (layout.level[None, :] <= budgets[:, None]).astype(np.float32)
        return mul(out, Tensor(act[:, :, None]))

    def velocity(self, tokens: np.ndarray, t_levels: np.ndarray,
                 class_id: int | None, grid: tuple[int, int, int],
                 budget: int | None = None) -> np.ndarray:
        """Single-sample inference velocity. tokens: (m*P, d); t_levels: (m,).
        class_id None means the null (unconditional) embedding."""
        P = grid[0] * grid[1] * grid[2]
        m = tokens.shape[0] // P
        cid = self.config.null_class if class_id is None else int(class_id)
        b = m if budget is None else budget
        with no_grad():
            out = self.velocity_t(Tensor(tokens[None]), np.asarray(t_levels)[None],
                                  np.array([cid]), np.array([b]), grid)
        return out.data[0]

    # -- incremental forward over cached levels ---------------------------------
    def velocity_new_level(self, x_new: np.ndarray, t: float, class_id: int | None,
                           level: int, grid: tuple[int, int, int],
                           cache: list, kv_sink: list | None = None) -> np.ndarray:
        """Velocity for level `level` tokens given cached K/V of levels below.

        x_new: (P, d). cache: per-block (k, v) arrays covering levels
        1..level-1, already rotated; one softmax runs over [cached, new] keys.
        When kv_sink is a list, each block appends this level's (k, v).
        """
        c = self.config
        T, Hg, Wg = grid
        P = T * Hg * Wg
        cid = c.null_class if class_id is None else int(class_id)
        # level-j rows of the joint table are the same for every total level
        # count, so cached keys and new queries share one coordinate system
        cos, sin = self._grid_rope(grid, level)
        rope_new = (cos[-P:], sin[-P:])
        q_layout = TokenLayout(kind=np.ones(P, int), patch=np.arange(P),
                               level=np.full(P, level),
                               segment=np.repeat(np.arange(T), Hg * Wg))
        k_layout = TokenLayout.for_grid(grid, level)
        allow = build_lca_step_mask(q_layout, k_layout, self._temporal(grid)).allow
        with no_grad():
            cond, cls = self._cond_tokens(np.array([[t]], dtype=np.float64),
                                          np.array([cid]), P)
            h = self.x_in(Tensor(x_new[None]))
            for blk, past in zip(self.blocks, cache):
                sink = [] if kv_sink is not None else None
                h = blk(h, cond, allow, rope_new, ctx=cls, past_kv=past, kv_sink=sink)
                if kv_sink is not None:
                    kv_sink.append(sink[0])
            fm = self.final_mod(nn.silu(cond))
            shift, scale = fm[..., :c.hidden], fm[..., c.hidden:]
            out = self.x_out(nn.modulate(self.final_norm(h), shift, scale))
        return out.data[0]

    def empty_cache(self) -> list:
        """Per-block empty K/V: zero-length arrays ready for concatenation."""
        c = self.config
        dh = c.hidden // c.heads
        return [(np.zeros((1, c.heads, 0, dh), np.float32),
                 np.zeros((1, c.heads, 0, dh), np.float32)) for _ in self.blocks]

    # -- persistence -------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, "dit", self.config.to_dict(),
                        {k: v.astype(np.float32) for k, v in self.store.state_arrays().items()})

    @classmethod
    def load(cls, path: str | Path) -> "DiT":
        kind, config, arrays = load_checkpoint(path)
        if kind != "dit":
            raise ValueError(f"checkpoint at {path} holds a {kind!r}, not a velocity model")
        model = cls(DiTConfig.from_dict(config))
        model.store.load_arrays(arrays)
        return model


# -- rectified flow -------------------------------------------------------------

def rf_training_pair(z: np.ndarray, rng: np.random.Generator, n_levels: int,
                     num_patches: int, shared_time: bool = False
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (x_t, t_levels, target) for a batch of clean level-major tokens.

    z: (B, m*P, d). Times are logit-normal (sigmoid of a standard normal),
    one per level per sample, or one per sample when shared_time. The path is
    the straight interpolation x_t = (1 - t) z + t e with target e - z.
    """
    B, L, d = z.shape
    m, P = n_levels, num_patches
    if m * P != L:
        raise ValueError(f"token count {L} != levels {m} x patches {P}")
    if shared_time:
        t = rng.standard_normal((B, 1))
        t_levels = np.repeat(t, m, axis=1)
    else:
        t_levels = rng.standard_normal((B, m))
    t_levels = 1.0 / (1.0 + np.exp(-t_levels))
    eps = rng.standard_normal(z.shape).astype(z.dtype)
    t_tok = np.repeat(t_levels, P, axis=1)[..., None].astype(z.dtype)
    x_t = (1.0 - t_tok) * z + t_tok * eps
    target = (eps - z).astype(z.dtype)
    return x_t, t_levels, target


def velocity_loss(pred: Tensor, target: np.ndarray, active: np.ndarray,
                  dir_weight: float) -> tuple[Tensor, dict]:
    """MSE plus a direction term (1 - cosine) over active tokens.

    active: (B, L) float 0/1. Both terms are means over active tokens.
    """
    eps = 1e-8
    w = active[..., None].astype(np.float32)
    denom = float(active.sum())
    if denom == 0:
        raise ValueError("no active tokens in batch")
    tgt = Tensor(target.astype(np.float32))
    diff = pred - tgt
    mse = reduce_sum(mul(mul(diff, diff), Tensor(w))) / (denom * pred.shape[-1])
    dot = reduce_sum(mul(pred, tgt), axis=-1)
    np_ = (reduce_sum(mul(pred, pred), axis=-1) + eps) ** 0.5
    nt = (reduce_sum(mul(tgt, tgt), axis=-1) + eps) ** 0.5
    cos = dot / mul(np_, nt)
    dir_term = reduce_sum(mul(1.0 - cos, Tensor(active.astype(np.float32)))) / denom
    total = mse + mul(dir_term, dir_weight)
    return total, {"mse": float(mse.data), "dir": float(dir_term.data)}


# -- sampling ---------------------------------------------------------------------

def level_noise(seed: int, level: int, num_patches: int, d: int) -> np.ndarray:
    """Initial noise for one level, from a per-level stream: independent of
    how many levels a run generates."""
    rng = np.random.default_rng([seed, level])
    return rng.standard_normal((num_patches, d)).astype(np.float32)


def _guided_velocity(model: DiT, tokens: np.ndarray, t_levels: np.ndarray, t_now: float,
                     class_id: int, grid: tuple[int, int, int], cfg_scale: float,
                     cfg_interval: float, counter: dict | None = None) -> np.ndarray:
    """Classifier-free-guided velocity. Exactly one branch runs when the scale
    degenerates (1 -> conditional only, 0 -> unconditional only) so those
    settings are bitwise equal to the single-branch paths."""
    def count(times: int):
        if counter is not None:
            counter["pairs"] += times * _joint_pairs(model, grid, tokens.shape[0])

    if cfg_scale == 0.0:
        count(1)
        return model.velocity(tokens, t_levels, None, grid)
    if cfg_scale == 1.0 or (t_now < cfg_interval):
        count(1)
        return model.velocity(tokens, t_levels, class_id, grid)
    count(2)
    v_c = model.velocity(tokens, t_levels, class_id, grid)
    v_u = model.velocity(tokens, t_levels, None, grid)
    return v_u + cfg_scale * (v_c - v_u)


def _joint_pairs(model: DiT, grid: tuple[int, int, int], L: int) -> int:
    P = grid[0] * grid[1] * grid[2]
    m = L // P
    layout = TokenLayout.for_grid(grid, m)
    temporal = model.config.temporal_causal and grid[0] > 1
    return build_lca_mask(layout, LevelBudget.uniform(m, P), temporal).allowed_pairs() * len(model.blocks)


def sample(model: DiT, class_id: int, seed: int, levels: int,
           grid: tuple[int, int, int], steps: int | None = None,
           cfg_scale: float | None = None, cfg_interval: float | None = None,
           time_shift: float | None = None,
           counter: dict | None = None) -> LatentGrid:
    """One-shot generation of `levels` latent levels on a shared trajectory."""
    c = model.config
    steps = c.steps if steps is None else steps
    cfg_scale = c.cfg_scale if cfg_scale is None else cfg_scale
    cfg_interval = c.cfg_interval if cfg_interval is None else cfg_interval
    time_shift = c.time_shift if time_shift is None else time_shift
    T, H, W = grid
    P = T * H * W
    m = levels
    if not 1 <= m <= c.n:
        raise ValueError(f"levels must lie in [1, {c.n}]")
    x = np.concatenate([level_noise(seed, j, P, c.latent_dim) for j in range(1, m + 1)])

    def v_fn(xx, t):
        t_levels = np.full(m, t)
        return _guided_velocity(model, xx, t_levels, t, class_id, grid,
                                cfg_scale, cfg_interval, counter)

    out = euler_trajectory(v_fn, x, steps, time_shift)
    budget = LevelBudget.uniform(c.n, P, m)
    full = np.zeros((c.n * P, c.latent_dim), np.float32)
    full[:m * P] = out
    return LatentGrid.from_tokens(full, grid, budget)


# -- progressive generation sessions ----------------------------------------------

@dataclass
class GenSession:
    """State of one coarse-to-fine generation: finalized levels, per-branch
    K/V caches, and everything needed to refine deterministically."""

    id: str
    class_id: int
    seed: int
    grid: tuple[int, int, int]
    max_levels: int
    steps: int
    cfg_scale: float
    cfg_interval: float
    time_shift: float
    latents: np.ndarray            # (max_levels, P, d), filled progressively
    levels_done: int = 0
    caches: dict = field(default_factory=dict)   # branch -> per-block (k, v)
    attn_pairs: int = 0            # trajectory velocity evaluations only
    cache_build_pairs: int = 0     # clean passes that extend the caches

    @property
    def num_patches(self) -> int:
        t, h, w = self.grid
        return t * h * w

    def level_digest(self, level: int) -> str:
        return hashlib.sha256(self.latents[level - 1].tobytes()).hexdigest()

    def to_grid(self, n_total: int, levels: int | None = None) -> LatentGrid:
        """Finished latents as a decodable grid, optionally truncated to a
        lower level count (levels <= levels_done)."""
        done = self.levels_done if levels is None else levels
        if not 0 <= done <= self.levels_done:
            raise ValueError(f"levels must lie in [0, {self.levels_done}]")
        P = self.num_patches
        d = self.latents.shape[-1]
        full = np.zeros((n_total * P, d), np.float32)
        full[:done * P] = self.latents[:done].reshape(-1, d)
        budget = LevelBudget.uniform(n_total, P, max(done, 1))
        return LatentGrid.from_tokens(full, self.grid, budget)


def new_session(model: DiT, session_id: str, class_id: int, seed: int,
                grid: tuple[int, int, int], steps: int | None = None,
                cfg_scale: float | None = None) -> GenSession:
    c = model.config
    if not 0 <= class_id < c.num_classes:
        raise ValueError(f"class_id must lie in [0, {c.num_classes})")
    T, H, W = grid
    P = T * H * W
    sess = GenSession(
        id=session_id, class_id=class_id, seed=seed, grid=grid,
        max_levels=c.n, steps=c.steps if steps is None else steps,
        cfg_scale=c.cfg_scale if cfg_scale is None else cfg_scale,
        cfg_interval=c.cfg_interval, time_shift=c.time_shift,
        latents=np.zeros((c.n, P, c.latent_dim), np.float32))
    sess.caches = {"cond": model.empty_cache(), "uncond": model.empty_cache()}
    return sess


def _step_pairs(model: DiT, grid, level: int) -> int:
    P = grid[0] * grid[1] * grid[2]
    # each new-level query attends all levels <= level in every patch; the
    # temporal flag removes the same pairs the joint mask would remove
    q_layout = TokenLayout(kind=np.ones(P, int), patch=np.arange(P),
                           level=np.full(P, level),
                           segment=np.repeat(np.arange(grid[0]), grid[1] * grid[2]))
    k_layout = TokenLayout.for_grid(grid, level)
    allow = build_lca_step_mask(q_layout, k_layout, model.config.temporal_causal and grid[0] > 1)
    return allow.allowed_pairs() * len(model.blocks)


def refine(model: DiT, sess: GenSession, step_hook: Callable | None = None) -> int:
    """Generate the next level on top of the finalized ones. Lower-level
    latents are never touched; their cached K/V carry their contribution.
    step_hook(level, t, x, v) observes every Euler step for verification.
    Returns the new levels_done."""
    if sess.levels_done >= sess.max_levels:
        raise ValueError(f"session {sess.id} already holds all {sess.max_levels} levels")
    j = sess.levels_done + 1
    P = sess.num_patches
    c = model.config
    x = level_noise(sess.seed, j, P, c.latent_dim)
    ts = time_grid(sess.steps, sess.time_shift)
    pairs_per_eval = _step_pairs(model, sess.grid, j)

    def v_at(xx: np.ndarray, t: float) -> np.ndarray:
        use_cfg = sess.cfg_scale not in (0.0, 1.0) and t >= sess.cfg_interval
        if sess.cfg_scale == 0.0:
            sess.attn_pairs += pairs_per_eval
            return model.velocity_new_level(xx, t, None, j, sess.grid, sess.caches["uncond"])
        v_c = model.velocity_new_level(xx, t, sess.class_id, j, sess.grid, sess.caches["cond"])
        sess.attn_pairs += pairs_per_eval
        if not use_cfg:
            return v_c
        v_u = model.velocity_new_level(xx, t, None, j, sess.grid, sess.caches["uncond"])
        sess.attn_pairs += pairs_per_eval
        return v_u + sess.cfg_scale * (v_c - v_u)

    for k in range(sess.steps):
        v = v_at(x, float(ts[k]))
        if step_hook is not None:
            step_hook(j, float(ts[k]), x, v)
        x = x + x.dtype.type(ts[k + 1] - ts[k]) * v

    sess.latents[j - 1] = x
    sess.levels_done = j
    _extend_caches(model, sess, x, j, pairs_per_eval)
    return sess.levels_done


def _extend_caches(model: DiT, sess: GenSession, x: np.ndarray, j: int,
                   pairs_per_eval: int) -> None:
    # extend both caches with this level's K/V at its clean state
    for branch, cid in (("cond", sess.class_id), ("uncond", None)):
        sink: list = []
        model.velocity_new_level(x, 0.0, cid, j, sess.grid, sess.caches[branch], kv_sink=sink)
        sess.cache_build_pairs += pairs_per_eval
        sess.caches[branch] = [
            (np.concatenate([pk, nk], axis=2), np.concatenate([pv, nv], axis=2))
            for (pk, pv), (nk, nv) in zip(sess.caches[branch], sink)]


def rebuild_caches(model: DiT, sess: GenSession) -> None:
    """Recompute both branch caches from the finished latents, e.g. after a
    session is restored from a snapshot that stores latents only. Produces
    the same arrays the original refinements left behind."""
    sess.caches = {"cond": model.empty_cache(), "uncond": model.empty_cache()}
    for j in range(1, sess.levels_done + 1):
        _extend_caches(model, sess, sess.latents[j - 1], j,
                       _step_pairs(model, sess.grid, j))
