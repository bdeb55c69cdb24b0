"""Loss assembly and the staged training loops.

The tokenizer trains on (input scale, output scale) pairs of the same scene:
symmetric stages reconstruct the scale they encoded, asymmetric stages decode
a different scale of the same sample, which the procedural renderer can
ground-truth exactly. Per-patch level budgets are drawn fresh every step so
coarse levels learn to stand alone.

The velocity model trains on frozen-tokenizer latents with per-level
timesteps and classifier-free conditioning dropout.

Both loops are bitwise reproducible for a fixed plan and seed: every random
choice (scene, scales, budgets, times, noise, dropout) comes from one seeded
generator consumed in a fixed order.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import Sample, render
from .diffusion import DiT, DiTConfig, rf_training_pair, velocity_loss
from .geometry import ScaleSpec
from .masks import LevelBudget, TokenLayout
from .tensor import Tensor, backward, mul, no_grad, reduce_mean, relu
from .tokenizer import Tokenizer, TokenizerConfig


@dataclass(frozen=True)
class LossWeights:
    """Loss term weights. The perceptual and adversarial slots exist for
    config fidelity but nothing consumes them at this scale."""

    perceptual: float = 1.0      # inert: no pretrained feature net here
    adversarial: float = 0.2     # inert: no discriminator here
    margin_l2: float = 0.001
    direction: float = 0.1
    margin: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass(frozen=True)
class TrainStage:
    """One curriculum stage.

    scales_in/scales_out are (h, w, f, t) tuples; a step draws one of each.
    Equal lists with a shared draw make the stage symmetric. denoise perturbs
    the decoder input; freeze_encoder restricts updates to decoder weights.
    """

    name: str
    steps: int
    batch_size: int = 4
    lr: float = 1e-3
    scales_in: tuple = ((32, 32, 1, 1),)
    scales_out: tuple | None = None   # None: reconstruct the input scale
    denoise: bool = False
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("stage steps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales_in"] = [list(s) for s in self.scales_in]
        d["scales_out"] = None if self.scales_out is None else [list(s) for s in self.scales_out]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainStage":
        d = dict(d)
        d["scales_in"] = tuple(tuple(s) for s in d["scales_in"])
        if d.get("scales_out") is not None:
            d["scales_out"] = tuple(tuple(s) for s in d["scales_out"])
        return cls(**d)


@dataclass(frozen=True)
class TrainPlan:
    seed: int = 0
    stages: tuple[TrainStage, ...] = ()
    log_every: int = 25
    eval_every: int = 500
    heldout: int = 8

    def __post_init__(self):
        if not self.stages:
            raise ValueError("plan needs at least one stage")

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stages": [s.to_dict() for s in self.stages],
                "log_every": self.log_every, "eval_every": self.eval_every,
                "heldout": self.heldout}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(seed=d.get("seed", 0),
                   stages=tuple(TrainStage.from_dict(s) for s in d["stages"]),
                   log_every=d.get("log_every", 25),
                   eval_every=d.get("eval_every", 500),
                   heldout=d.get("heldout", 8))


def default_tokenizer_plan(steps: int = 3000, batch_size: int = 4,
                           lr: float = 1e-3, seed: int = 0) -> TrainPlan:
    """Symmetric 32-square pretrain, then asymmetric multi-scale."""
    sym = max(1, int(steps * 0.6))
    scales = ((32, 32, 1, 1), (48, 48, 1, 1), (64, 64, 1, 1))
    return TrainPlan(seed=seed, stages=(
        TrainStage("symmetric", sym, batch_size, lr),
        TrainStage("asymmetric", steps - sym, batch_size, lr,
                   scales_in=scales, scales_out=scales, denoise=True),
    ))


def default_dit_plan(steps: int = 2000, batch_size: int = 8,
                     lr: float = 1e-3, seed: int = 0) -> TrainPlan:
    return TrainPlan(seed=seed, stages=(
        TrainStage("flow", steps, batch_size, lr),))


# -- sampling helpers ------------------------------------------------------------

def level_pmf(n: int) -> np.ndarray:
    """Linear preference for deeper budgets: p(m) = m / (n(n+1)/2)."""
    m = np.arange(1, n + 1, dtype=np.float64)
    return m / m.sum()


def sample_level_budget(n: int, rng: np.random.Generator, num_patches: int,
                        per_patch: bool = False) -> LevelBudget:
    """Draw a level budget with the linear pmf: independently per patch for
    tokenizer training, one shared draw for velocity training."""
    pmf = level_pmf(n)
    if per_patch:
        draws = rng.choice(np.arange(1, n + 1), size=num_patches, p=pmf)
    else:
        draws = np.full(num_patches, rng.choice(np.arange(1, n + 1), p=pmf))
    return LevelBudget(n, draws)


def null_dropout_mask(rng: np.random.Generator, batch_size: int,
                      rate: float = 0.1) -> np.ndarray:
    """Per-sample mask of labels to replace with the null class."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    return rng.uniform(size=batch_size) < rate


def perturb_latents(z: np.ndarray, rng: np.random.Generator, sigma: float = 3.0,
                    lam: float | None = None) -> np.ndarray:
    """Blend latents toward Gaussian noise: lam*z + (1-lam)*eps with
    lam ~ U(0,1) per sample and eps ~ N(0, sigma^2). lam can be pinned."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lead = z.shape[0] if z.ndim > 1 else 1
    lams = np.full(lead, lam, dtype=np.float64) if lam is not None else rng.uniform(size=lead)
    shaped = lams.reshape((lead,) + (1,) * (z.ndim - 1)).astype(z.dtype)
    eps = (rng.standard_normal(z.shape) * sigma).astype(z.dtype)
    return shaped * z + (1.0 - shaped) * eps


def _perturb_tensor(z: Tensor, rng: np.random.Generator, sigma: float) -> Tensor:
    """Graph version of perturb_latents; gradients flow through the z term."""
    dt = z.dtype
    lead = z.shape[0]
    lams = rng.uniform(size=lead).reshape((lead,) + (1,) * (z.ndim - 1))
    eps = (rng.standard_normal(z.shape) * sigma).astype(dt)
    return mul(z, Tensor(lams.astype(dt))) + Tensor((1.0 - lams).astype(dt) * eps)


def _as_tensor(x, like_dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if like_dtype is not None:
        arr = arr.astype(like_dtype, copy=False)
    return Tensor(arr)


def l2_margin_loss(z, margin: float = 1.0) -> Tensor:
    """mean(max(0, |z| - margin)^2): free inside the margin, quadratic outside."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    zt = _as_tensor(z)
    excess = relu(zt.abs() - margin)
    return reduce_mean(mul(excess, excess))


def tokenizer_loss(pred: Tensor, gt: np.ndarray, z: Tensor,
                   weights: LossWeights) -> tuple[Tensor, dict]:
    """Pixel L2 plus margin regularization on the clean latents."""
    diff = pred - _as_tensor(gt, pred.dtype)
    mse = reduce_mean(mul(diff, diff))
    reg = l2_margin_loss(z, weights.margin)
    total = mse + mul(reg, weights.margin_l2)
    return total, {"mse": float(mse.data), "margin": float(reg.data)}


# -- metrics log -----------------------------------------------------------------

class MetricsLog:
    """JSON-lines metrics writer, one object per logged step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _abort_on_nan(step: int, stage: str, terms: dict):
    bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
    if bad:
        raise RuntimeError(
            f"non-finite loss at step {step} (stage {stage}): {bad}; "
            f"finite terms: { {k: v for k, v in terms.items() if np.isfinite(v)} }")


# -- tokenizer training ------------------------------------------------------------


class _RenderCache:
    """Scenes repeat across steps; rendered frames are pure, so memoize."""

    def __init__(self, supersample: int = 4):
        self.supersample = supersample
        self._store: dict = {}

    def get(self, scene, scale: ScaleSpec) -> Sample:
        key = (id(scene), scale)
        if key not in self._store:
            self._store[key] = render(scene, scale, self.supersample)
        return self._store[key]


def heldout_psnr_per_level(tok: Tokenizer, scenes, scale: ScaleSpec,
                           cache: _RenderCache | None = None) -> list[float]:
    """Mean reconstruction PSNR at each uniform budget m = 1..n."""
    cache = cache or _RenderCache()
    out = []
    for m in range(1, tok.config.n + 1):
        vals = [tok.reconstruct(cache.get(s, scale), budget=m)[1] for s in scenes]
        out.append(float(np.mean(vals)))
    return out


def train_tokenizer(plan: TrainPlan, config: TokenizerConfig, scenes,
                    out_dir: str | Path, weights: LossWeights = LossWeights(),
                    heldout_scenes=None, tokenizer: Tokenizer | None = None,
                    quiet: bool = True) -> Tokenizer:
    """Run the staged tokenizer curriculum and write checkpoint + metrics.

    scenes: training SceneSpecs (rendered on demand, per-scale memoized);
    heldout_scenes: used only for the periodic PSNR-per-level report.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tok = tokenizer or Tokenizer(config, seed=plan.seed)
    rng = np.random.default_rng(plan.seed)
    log = MetricsLog(out_dir / "tokenizer_metrics.jsonl")
    cache = _RenderCache()
    heldout_scenes = heldout_scenes or []
    step = 0
    asym_steps = 0
    t0 = time.monotonic()
    try:
        for stage in plan.stages:
            opt_params = tok.store.params
            if stage.freeze_encoder:
                opt_params = {k: p for k, p in tok.store.params.items()
                              if k.startswith("dec.")}
            opt = nn.AdamW(opt_params, lr=stage.lr)
            scales_out = stage.scales_out or stage.scales_in
            for _ in range(stage.steps):
                step += 1
                idx = rng.integers(0, len(scenes), size=stage.batch_size)
                s_in = ScaleSpec(*stage.scales_in[rng.integers(len(stage.scales_in))])
                if stage.scales_out is None:
                    s_out = s_in
                else:
                    s_out = ScaleSpec(*scales_out[rng.integers(len(scales_out))])
                if s_in != s_out:
                    asym_steps += 1
                pixels_in = np.stack([cache.get(scenes[i], s_in).pixels for i in idx])
                pixels_out = np.stack([cache.get(scenes[i], s_out).pixels for i in idx])

                geom = tok.geometry_for(s_in)
                budget = sample_level_budget(
                    config.n, rng, geom.num_patches * stage.batch_size, per_patch=True)
                budgets = budget.per_patch.reshape(stage.batch_size, geom.num_patches)

                z, _ = tok.encode_t(pixels_in, s_in, budgets)
                dec_in = _perturb_tensor(z, rng, 3.0) if stage.denoise else z
                pred = tok.decode_t(dec_in, geom.grid, budgets, s_out)
                loss, terms = tokenizer_loss(pred, pixels_out, z, weights)
                terms["loss"] = float(loss.data)
                _abort_on_nan(step, stage.name, terms)
                tok.store.zero_grad()
                backward(loss)
                opt.step()

                if step % plan.log_every == 0 or step == 1:
                    rec = {"step": step, "stage": stage.name, **terms,
                           "asym_frac": asym_steps / step,
                           "elapsed_s": round(time.monotonic() - t0, 2)}
                    if heldout_scenes and (step % plan.eval_every == 0):
                        rec["psnr_per_level"] = heldout_psnr_per_level(
                            tok, heldout_scenes, ScaleSpec(*stage.scales_in[0]), cache)
                    log.write(rec)
                    if not quiet:
                        print(json.dumps(rec))
    finally:
        log.close()
    tok.save(out_dir / "tokenizer")
    return tok


# -- velocity model training --------------------------------------------------------

def train_dit(plan: TrainPlan, config: DiTConfig, tok: Tokenizer, scenes,
              out_dir: str | Path, weights: LossWeights = LossWeights(),
              null_dropout: float = 0.1, quiet: bool = True) -> DiT:
    """Train the velocity model on frozen-tokenizer latents.

    Budgets are shared per sample; each sample's class label is replaced by
    the null embedding with probability null_dropout for guidance training.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = DiT(config, seed=plan.seed)
    rng = np.random.default_rng(plan.seed)
    log = MetricsLog(out_dir / "dit_metrics.jsonl")
    cache = _RenderCache()
    step = 0
    null_steps = 0
    t0 = time.monotonic()
    try:
        for stage in plan.stages:
            opt = nn.AdamW(model.store.params, lr=stage.lr)
            for _ in range(stage.steps):
                step += 1
                idx = rng.integers(0, len(scenes), size=stage.batch_size)
                scale = ScaleSpec(*stage.scales_in[rng.integers(len(stage.scales_in))])
                pixels = np.stack([cache.get(scenes[i], scale).pixels for i in idx])
                geom = tok.geometry_for(scale)
                P = geom.num_patches

                budgets = np.array([
                    sample_level_budget(config.n, rng, 1).per_patch[0]
                    for _ in range(stage.batch_size)])
                with no_grad():
                    z, _ = tok.encode_t(
                        pixels, scale, np.repeat(budgets[:, None], P, axis=1))
                z_np = z.data

                x_t, t_levels, target = rf_training_pair(
                    z_np, rng, config.n, P)
                drop = null_dropout_mask(rng, stage.batch_size, null_dropout)
                null_steps += int(drop.sum())
                class_ids = np.array([scenes[i].class_id for i in idx])
                class_ids[drop] = config.null_class

                layout = TokenLayout.for_grid(geom.grid, config.n)
                active = (layout.level[None, :] <= budgets[:, None]).astype(np.float32)
                x_t = x_t * active[:, :, None]

                pred = model.velocity_t(Tensor(x_t.astype(np.float32)), t_levels,
                                        class_ids, budgets, geom.grid)
                loss, terms = velocity_loss(pred, target, active, weights.direction)
                terms["loss"] = float(loss.data)
                _abort_on_nan(step, stage.name, terms)
                model.store.zero_grad()
                backward(loss)
                opt.step()

                if step % plan.log_every == 0 or step == 1:
                    rec = {"step": step, "stage": stage.name, **terms,
                           "null_frac": null_steps / (step * stage.batch_size),
                           "elapsed_s": round(time.monotonic() - t0, 2)}
                    log.write(rec)
                    if not quiet:
                        print(json.dumps(rec))
    finally:
        log.close()
    model.save(out_dir / "dit")
    return model


# -- config file -------------------------------------------------------------------

def save_train_config(path: str | Path, plan: TrainPlan, tokenizer: TokenizerConfig | None = None,
                      dit: DiTConfig | None = None, weights: LossWeights = LossWeights()):
    blob: dict = {"plan": plan.to_dict(), "weights": weights.to_dict()}
    if tokenizer is not None:
        blob["tokenizer"] = tokenizer.to_dict()
    if dit is not None:
        blob["dit"] = dit.to_dict()
    Path(path).write_text(json.dumps(blob, indent=1, sort_keys=True))


def load_train_config(path: str | Path) -> dict:
    """Returns {plan, weights, tokenizer?, dit?} with dataclasses rebuilt."""
    blob = json.loads(Path(path).read_text())
    out = {"plan": TrainPlan.from_dict(blob["plan"]),
           "weights": LossWeights.from_dict(blob.get("weights", {}))}
    if "tokenizer" in blob:
        out["tokenizer"] = TokenizerConfig.from_dict(blob["tokenizer"])
    if "dit" in blob:
        out["dit"] = DiTConfig.from_dict(blob["dit"])
    return out
