"""Synthetic scenes, resampling, and image metrics.

Scenes are analytic: soft-edged rectangles, circles, and linear gradient
washes over a flat background, each optionally drifting linearly over time.
Rendering point-samples the scene field at corner-aligned pixel positions
(y = i / (h-1), scaled so the shorter side spans [0, 1]) and tail-aligned
frame times ((j + 1) / fps), so the same scene rendered at two scales agrees
wherever the sample lattices line up: lower frame rates are exact subsets of
higher ones, and corner-aligned downsampling of a finer render closely
matches a direct coarse render because the field is smooth by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ScaleSpec

EDGE_SOFTNESS = 0.1  # edge band width in scene units; keeps the field smooth


@dataclass
class Sample:
    """Pixel data in [0, 1], shaped (t, h, w, 3) float32, plus its scale."""

    pixels: np.ndarray
    scale: ScaleSpec

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 3:
            px = px[None]
        if px.ndim != 4 or px.shape[-1] != 3:
            raise ValueError(f"pixels must be (t, h, w, 3), got {px.shape}")
        s = self.scale
        if px.shape[:3] != (s.t, s.h, s.w):
            raise ValueError(f"pixels {px.shape[:3]} do not match scale ({s.t}, {s.h}, {s.w})")
        self.pixels = px

    @property
    def frame0(self) -> np.ndarray:
        return self.pixels[0]


@dataclass(frozen=True)
class Primitive:
    kind: str                      # rect | circle | gradient
    center: tuple[float, float]    # (y, x) in scene units
    size: tuple[float, float]      # rect half-extents / (radius, _) / ramp (len, angle)
    color: tuple[float, float, float]
    alpha: float = 1.0
    velocity: tuple[float, float] = (0.0, 0.0)  # scene units per second

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "size": list(self.size),
                "color": list(self.color), "alpha": self.alpha, "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(kind=d["kind"], center=tuple(d["center"]), size=tuple(d["size"]),
                   color=tuple(d["color"]), alpha=d["alpha"], velocity=tuple(d["velocity"]))


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic scene description; complexity is the primitive count."""

    seed: int
    class_id: int
    background: tuple[float, float, float]
    primitives: tuple[Primitive, ...] = field(default_factory=tuple)

    @property
    def complexity(self) -> int:
        return len(self.primitives)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "class_id": self.class_id,
                "background": list(self.background),
                "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(seed=d["seed"], class_id=d["class_id"],
                   background=tuple(d["background"]),
                   primitives=tuple(Primitive.from_dict(p) for p in d["primitives"]))


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _coverage(prim: Primitive, yy: np.ndarray, xx: np.ndarray, tau: float) -> np.ndarray:
    cy = prim.center[0] + prim.velocity[0] * tau
    cx = prim.center[1] + prim.velocity[1] * tau
    if prim.kind == "rect":
        sdf = np.maximum(np.abs(yy - cy) - prim.size[0], np.abs(xx - cx) - prim.size[1])
    elif prim.kind == "circle":
        sdf = np.hypot(yy - cy, xx - cx) - prim.size[0]
    elif prim.kind == "gradient":
        # linear ramp through the center; exactly reproduced by bilinear resampling
        length, angle = prim.size
        dy, dx = math.sin(angle), math.cos(angle)
        proj = ((yy - cy) * dy + (xx - cx) * dx) / length + 0.5
        return np.clip(proj, 0.0, 1.0) * prim.alpha
    else:
        raise ValueError(f"unknown primitive kind {prim.kind!r}")
    return _smoothstep(0.5 - sdf / EDGE_SOFTNESS) * prim.alpha


def _pixel_axis(n: int, extent: float) -> np.ndarray:
    if n == 1:
        return np.array([0.5 * extent])
    return np.arange(n) * (extent / (n - 1))


def _subsample_axis(n: int, extent: float, s: int) -> np.ndarray:
    """s sample positions per pixel, boxed around each corner-aligned point."""
    centers = _pixel_axis(n, extent)
    step = extent if n == 1 else extent / (n - 1)
    offsets = ((np.arange(s) + 0.5) / s - 0.5) * step
    return (centers[:, None] + offsets[None, :]).reshape(-1)


def render(scene: SceneSpec, scale: ScaleSpec, supersample: int = 4) -> Sample:
    """Render a scene at a concrete scale with box-filtered anti-aliasing
    (supersample^2 samples per pixel; 1 falls back to point sampling).

    Time is always point-sampled at each frame's timestamp, so clips at
    divisor frame rates share frames with their higher-rate variants exactly.
    """
    if supersample < 1:
        raise ValueError(f"supersample factor must be >= 1, got {supersample}")
    s = supersample
    short = min(scale.h, scale.w)
    ys = _subsample_axis(scale.h, scale.h / short, s)
    xs = _subsample_axis(scale.w, scale.w / short, s)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    frames = np.empty((scale.t, scale.h, scale.w, 3), dtype=np.float32)
    base = np.empty((scale.h * s, scale.w * s, 3), dtype=np.float64)
    for j in range(scale.t):
        tau = (j + 1) / scale.f
        base[...] = np.asarray(scene.background)
        for prim in scene.primitives:
            cov = _coverage(prim, yy, xx, tau)[..., None]
            base += cov * (np.asarray(prim.color) - base)
        pixel = base.reshape(scale.h, s, scale.w, s, 3).mean(axis=(1, 3))
        frames[j] = np.clip(pixel, 0.0, 1.0).astype(np.float32)
    return Sample(frames, scale)


def resize_corner_aligned(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with corner alignment: output corners sample input
    corners exactly. Accepts (h, w, c) or (t, h, w, c)."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        return _resize_one(arr, out_h, out_w)
    return np.stack([_resize_one(f, out_h, out_w) for f in arr])


def _axis_map(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def _resize_one(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    y0, y1, fy = _axis_map(out_h, img.shape[0])
    x0, x1, fx = _axis_map(out_w, img.shape[1])
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    a = img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
    b = img[np.ix_(y0, x1)] * (1 - fy) * fx
    c = img[np.ix_(y1, x0)] * fy * (1 - fx)
    d = img[np.ix_(y1, x1)] * fy * fx
    return (a + b + c + d).astype(img.dtype, copy=False)


PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99.0 (identical inputs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)."""
    from scipy.signal import convolve2d

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kern = _gaussian_kernel()
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx = convolve2d(x, kern, mode="valid")
        my = convolve2d(y, kern, mode="valid")
        mxx = convolve2d(x * x, kern, mode="valid")
        myy = convolve2d(y * y, kern, mode="valid")
        mxy = convolve2d(x * y, kern, mode="valid")
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# -- corpus -----------------------------------------------------------------

# per-class background and primitive palettes, chosen to be far apart
_CLASS_BG = np.array([
    [0.92, 0.90, 0.85],
    [0.12, 0.15, 0.25],
    [0.75, 0.88, 0.94],
    [0.25, 0.08, 0.12],
    [0.85, 0.80, 0.95],
    [0.10, 0.25, 0.15],
    [0.95, 0.85, 0.70],
    [0.20, 0.20, 0.20],
])

_CLASS_HUE = np.array([
    [0.85, 0.25, 0.20],
    [0.95, 0.75, 0.25],
    [0.20, 0.40, 0.80],
    [0.90, 0.55, 0.15],
    [0.30, 0.65, 0.35],
    [0.60, 0.25, 0.70],
    [0.20, 0.70, 0.70],
    [0.90, 0.35, 0.55],
])


def _random_primitive(rng: np.random.Generator, class_id: int, moving: bool) -> Primitive:
    kind = rng.choice(["rect", "circle", "gradient"], p=[0.45, 0.45, 0.1])
    hue = _CLASS_HUE[class_id % len(_CLASS_HUE)]
    color = np.clip(hue + rng.uniform(-0.25, 0.25, size=3), 0.0, 1.0)
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    if kind == "rect":
        size = (rng.uniform(0.06, 0.22), rng.uniform(0.06, 0.22))
    elif kind == "circle":
        size = (rng.uniform(0.06, 0.22), 0.0)
    else:
        size = (rng.uniform(0.6, 1.2), rng.uniform(0, 2 * math.pi))
    if moving:
        # keep the primitive inside the frame for clips up to 1 second
        vel = tuple(rng.uniform(-0.15, 0.15, size=2))
    else:
        vel = (0.0, 0.0)
    return Primitive(kind=kind, center=(float(cy), float(cx)), size=tuple(map(float, size)),
                     color=tuple(map(float, color)), alpha=float(rng.uniform(0.7, 1.0)),
                     velocity=vel)


def make_scene(seed: int, class_id: int, complexity: int, moving: bool = False) -> SceneSpec:
    rng = np.random.default_rng(seed)
    bg = _CLASS_BG[class_id % len(_CLASS_BG)]
    bg = tuple(np.clip(bg + rng.uniform(-0.05, 0.05, size=3), 0, 1).tolist())
    prims = tuple(_random_primitive(rng, class_id, moving) for _ in range(complexity))
    return SceneSpec(seed=seed, class_id=class_id, background=bg, primitives=prims)


def make_corpus(count: int, complexity: tuple[int, int] = (1, 8),
                num_classes: int = 4, seed: int = 0,
                moving: bool = False) -> list[SceneSpec]:
    """Deterministic corpus, complexity-stratified: per-complexity counts
    differ by at most one."""
    lo, hi = complexity
    if lo < 0 or hi < lo:
        raise ValueError(f"bad complexity range ({lo}, {hi})")
    levels = list(range(lo, hi + 1))
    scenes = []
    for i in range(count):
        c = levels[i % len(levels)]
        scenes.append(make_scene(seed=seed * 1_000_003 + i, class_id=i % num_classes,
                                 complexity=c, moving=moving))
    return scenes


# -- file formats ------------------------------------------------------------

def save_png(path: str | Path, frame: np.ndarray) -> None:
    """8-bit RGB PNG from a float (h, w, 3) frame in [0, 1]."""
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (h, w, 3), got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(str(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    img = Image.open(str(path)).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def encode_png(frame: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    data = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_video_dir(path: str | Path, sample: Sample) -> None:
    """Per-frame PNGs plus meta.json carrying fps and the frame count."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(sample.pixels):
        save_png(path / f"frame_{j:05d}.png", frame)
    with open(path / "meta.json", "w") as fh:
        json.dump({"fps": sample.scale.f, "frames": sample.scale.t,
                   "height": sample.scale.h, "width": sample.scale.w}, fh)


def load_video_dir(path: str | Path) -> Sample:
    path = Path(path)
    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    frames = [load_png(path / f"frame_{j:05d}.png") for j in range(meta["frames"])]
    px = np.stack(frames)
    return Sample(px, ScaleSpec(meta["height"], meta["width"], meta["fps"], meta["frames"]))


def save_corpus(path: str | Path, scenes: list[SceneSpec], extra: dict | None = None) -> None:
    doc = {"scenes": [s.to_dict() for s in scenes]}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_corpus(path: str | Path) -> list[SceneSpec]:
    with open(path) as fh:
        doc = json.load(fh)
    return [SceneSpec.from_dict(d) for d in doc["scenes"]]
