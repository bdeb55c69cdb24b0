"""Transformer building blocks and the AdamW optimizer.

Layers register their weights in a ParamStore keyed by dotted names, which is
also the checkpoint namespace. Blocks come in two flavors: plain pre-norm
(tokenizer stacks) and modulated pre-norm where a per-token conditioning
vector produces shift/scale/gate triples (diffusion stacks).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    _const,
    add,
    concat,
    masked_softmax,
    matmul,
    mul,
    reshape,
    rmsnorm,
    silu,
    swiglu_ffn,
    transpose,
)


class ParamStore:
    """Registry of named Parameters with a shared init RNG and dtype."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.params: dict[str, Parameter] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def param(self, name: str, shape, init="normal", std: float = 0.02) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if isinstance(init, np.ndarray):
            data = init.astype(self.dtype)
        elif init == "normal":
            data = (self.rng.standard_normal(shape) * std).astype(self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self.params.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr.astype(p.data.dtype)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, zero_init: bool = False):
        init = "zeros" if zero_init else "normal"
        # fan-in scaling keeps attention logits O(1) at any width; a flat std
        # leaves small models with near-uniform softmaxes that barely train
        self.w = store.param(f"{name}.w", (d_in, d_out), init=init,
                             std=d_in ** -0.5)
        self.b = store.param(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = add(y, self.b)
        return y


class RMSNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-6):
        self.gain = store.param(f"{name}.gain", (dim,), init="ones")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return rmsnorm(x, self.gain, self.eps)


class SwiGLU:
    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int):
        self.w_a = store.param(f"{name}.w_a", (dim, hidden), std=dim ** -0.5)
        self.w_b = store.param(f"{name}.w_b", (dim, hidden), std=dim ** -0.5)
        self.w_out = store.param(f"{name}.w_out", (hidden, dim), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return swiglu_ffn(x, self.w_a, self.w_b, self.w_out)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate half-pairs of head channels by precomputed angle tables.

    x: (..., L, dh) per head, cos/sin: (L, dh/2). Channel i pairs with
    i + dh/2; each pair is a 2-D rotation, so norms are preserved and the
    dot product of two rotated tokens depends on their coordinate deltas.
    """
    dh = x.shape[-1]
    half = dh // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c = Tensor(cos.astype(x.dtype, copy=False))
    s = Tensor(sin.astype(x.dtype, copy=False))
    return concat([add(mul(x1, c), mul(mul(x2, s), -1.0)),
                   add(mul(x1, s), mul(x2, c))], axis=-1)


class SelfAttention:
    """Multi-head self-attention with rotary positions and KV injection.

    past_kv, when given, is a (k, v) pair of plain arrays shaped
    (..., H, L_past, dh) holding already-rotated keys; new tokens attend the
    concatenation [past, new] under the provided mask.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.wq = Linear(store, f"{name}.wq", dim, dim, bias=False)
        self.wk = Linear(store, f"{name}.wk", dim, dim, bias=False)
        self.wv = Linear(store, f"{name}.wv", dim, dim, bias=False)
        self.wo = Linear(store, f"{name}.wo", dim, dim, bias=False, zero_init=True)

    def _heads(self, t: Tensor) -> Tensor:
        *batch, L, _ = t.shape
        nb = len(batch)
        perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)
        return transpose(reshape(t, (*batch, L, self.heads, self.dh)), perm)

    def _merge(self, t: Tensor) -> Tensor:
        *batch, H, L, dh = t.shape
        nb = len(batch)
        out = transpose(t, tuple(range(nb)) + (nb + 1, nb, nb + 2))
        return reshape(out, (*batch, L, self.dim))

    def __call__(self, x: Tensor, allow: np.ndarray, rope=None, past_kv=None,
                 kv_sink: list | None = None) -> Tensor:
        q = self._heads(self.wq(x))
        k = self._heads(self.wk(x))
        v = self._heads(self.wv(x))
        if rope is not None:
            cos, sin = rope
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
        if kv_sink is not None:
            kv_sink.append((k.data.copy(), v.data.copy()))
        if past_kv is not None:
            pk, pv = past_kv
            k = concat([Tensor(pk.astype(x.dtype, copy=False)), k], axis=-2)
            v = concat([Tensor(pv.astype(x.dtype, copy=False)), v], axis=-2)
        scale = _const(np.asarray(1.0 / math.sqrt(self.dh), dtype=x.dtype), x.dtype)
        kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        scores = mul(matmul(q, kt), scale)
        w = masked_softmax(scores, allow)
        return self.wo(self._merge(matmul(w, v)))


class CrossAttention:
    """Queries from tokens, keys/values from a conditioning sequence."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        self.wq = Linear(store, f"{name}.wq", dim, dim, bias=False)
        self.wk = Linear(store, f"{name}.wk", dim, dim, bias=False)
        self.wv = Linear(store, f"{name}.wv", dim, dim, bias=False)
        self.wo = Linear(store, f"{name}.wo", dim, dim, bias=False, zero_init=True)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        full = np.ones((x.shape[-2], ctx.shape[-2]), dtype=bool)

        def heads(t):
            *batch, L, _ = t.shape
            nb = len(batch)
            perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)
            return transpose(reshape(t, (*batch, L, self.heads, self.dh)), perm)

        q = heads(self.wq(x))
        k = heads(self.wk(ctx))
        v = heads(self.wv(ctx))
        scale = _const(np.asarray(1.0 / math.sqrt(self.dh), dtype=x.dtype), x.dtype)
        kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        w = masked_softmax(mul(matmul(q, kt), scale), full)
        out = matmul(w, v)
        *batch, H, L, dh = out.shape
        nb = len(batch)
        out = transpose(out, tuple(range(nb)) + (nb + 1, nb, nb + 2))
        return self.wo(reshape(out, (*batch, L, self.dim)))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    one = Tensor(np.ones((), dtype=x.dtype))
    return add(mul(x, add(one, scale)), shift)


class Block:
    """Pre-norm transformer block: x + attn(norm(x)); x + ffn(norm(x))."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 ffn_ratio: float = 2.0):
        hidden = int(dim * ffn_ratio)
        self.norm1 = RMSNorm(store, f"{name}.norm1", dim)
        self.attn = SelfAttention(store, f"{name}.attn", dim, heads)
        self.norm2 = RMSNorm(store, f"{name}.norm2", dim)
        self.ffn = SwiGLU(store, f"{name}.ffn", dim, hidden)

    def __call__(self, x: Tensor, allow: np.ndarray, rope=None,
                 past_kv=None, kv_sink=None) -> Tensor:
        x = add(x, self.attn(self.norm1(x), allow, rope, past_kv, kv_sink))
        return add(x, self.ffn(self.norm2(x)))


class ModulatedBlock:
    """Block with per-token shift/scale/gate conditioning (6 slots).

    The modulation projection is zero-initialized so every block starts as
    the identity map; with cross-attention enabled an extra gate slot is
    appended (7 total).
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 ffn_ratio: float = 2.0, cross: bool = False):
        hidden = int(dim * ffn_ratio)
        self.cross = cross
        slots = 7 if cross else 6
        self.mod = Linear(store, f"{name}.mod", dim, slots * dim, bias=True, zero_init=True)
        self.norm1 = RMSNorm(store, f"{name}.norm1", dim)
        self.attn = SelfAttention(store, f"{name}.attn", dim, heads)
        if cross:
            self.xattn = CrossAttention(store, f"{name}.xattn", dim, heads)
            self.normx = RMSNorm(store, f"{name}.normx", dim)
        self.norm2 = RMSNorm(store, f"{name}.norm2", dim)
        self.ffn = SwiGLU(store, f"{name}.ffn", dim, hidden)
        self.dim = dim

    def __call__(self, x: Tensor, cond: Tensor, allow: np.ndarray, rope=None,
                 ctx: Tensor | None = None, past_kv=None, kv_sink=None) -> Tensor:
        d = self.dim
        m = self.mod(silu(cond))
        sh1, sc1, g1 = m[..., 0:d], m[..., d:2 * d], m[..., 2 * d:3 * d]
        sh2, sc2, g2 = m[..., 3 * d:4 * d], m[..., 4 * d:5 * d], m[..., 5 * d:6 * d]
        h = self.attn(modulate(self.norm1(x), sh1, sc1), allow, rope, past_kv, kv_sink)
        x = add(x, mul(g1, h))
        if self.cross:
            gx = m[..., 6 * d:7 * d]
            x = add(x, mul(gx, self.xattn(self.normx(x), ctx)))
        x = add(x, mul(g2, self.ffn(modulate(self.norm2(x), sh2, sc2))))
        return x


class AdamW:
    """Decoupled weight decay Adam with bias correction.

    Moment buffers are keyed by parameter name; step() raises on non-finite
    gradients and names the offending parameter.
    """

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            adamw_step(p, self.m[name], self.v[name], self.lr, b1, b2, c1, c2,
                       self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def adamw_step(p: Parameter, m: np.ndarray, v: np.ndarray, lr: float,
               b1: float, b2: float, c1: float, c2: float, eps: float,
               weight_decay: float):
    """One parameter update. c1/c2 are the bias-correction denominators."""
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise ValueError(f"non-finite gradient in parameter {p.name!r}")
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / c1
    v_hat = v / c2
    upd = m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        upd = upd + weight_decay * p.data
    p.data -= (lr * upd).astype(p.data.dtype, copy=False)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0,
                       dtype=np.float32) -> np.ndarray:
    """Sinusoidal features for scalar times in [0, 1], shaped (..., dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t)[..., None] * 1000.0 * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[..., :1])], axis=-1)
    return emb.astype(dtype)
