"""Reverse-mode autodiff over numpy arrays.

Everything here is define-by-run: each op records its parents and a closure
that maps the output gradient to parent gradients. ``backward(loss)`` walks
the tape once and accumulates (+=) into every reachable leaf that requires
gradients, so repeated backward calls without zeroing sum their gradients.

Dtype discipline: float32 by default, float64 available for oracle checks.
Ops never silently mix dtypes between tensor operands.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / cache builds)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense row-major array plus optional tape bookkeeping.

    ``data`` is always a C-contiguous numpy array. ``grad`` is populated on
    leaves after ``backward``; for ``Parameter`` it is preallocated and
    accumulates across backward calls until explicitly zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            other = _const(other, self.dtype)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return power(self, 0.5)

    def abs(self):
        return absolute(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf with a unique name and a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


@dataclass(frozen=True)
class AttnMask:
    """Boolean attention mask: allow[q, k] == True lets query q read key k.

    Rows with no allowed key are legal; attention outputs zeros for them.
    """

    allow: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allow)
        if a.dtype != np.bool_ or a.ndim != 2:
            raise ValueError("AttnMask.allow must be a 2-D boolean matrix")
        object.__setattr__(self, "allow", a)

    @property
    def shape(self):
        return self.allow.shape

    def allowed_pairs(self) -> int:
        return int(self.allow.sum())


# -- tape plumbing ---------------------------------------------------------

def _wrap(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def _node(data: np.ndarray, parents, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._bwd = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires-grad leaf.

    loss must be a scalar (size 1). Grads add into existing buffers, so call
    sites must zero Parameter.grad between optimization steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    # Iterative topological order; graphs get deep enough to kill recursion.
    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            # leaf: accumulate
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                acc += pg


# -- primitive ops ----------------------------------------------------------

def _check_dtypes(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")


def _const(value, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = b if isinstance(b, Tensor) else _const(b, a.dtype)
    _check_dtypes(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = b if isinstance(b, Tensor) else _const(b, a.dtype)
    _check_dtypes(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = b if isinstance(b, Tensor) else _const(b, a.dtype)
    _check_dtypes(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims.

    The 2-D right operand case routes through np.dot so stacks of rows hit a
    single GEMM instead of a python-level batch loop.
    """
    a, b = _wrap(a), _wrap(b)
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    if b.ndim == 2:
        out = np.dot(a.data, b.data)

        def bwd2(g):
            ga = np.dot(g, b.data.T)
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = np.dot(a2.T, g2)
            return ga, gb

        return _node(out, (a, b), bwd2)

    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _node(np.ascontiguousarray(out), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(out, (a,), bwd)


def getitem(a, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing only, so backward can use +=."""
    a = _wrap(a)
    out = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _node(np.ascontiguousarray(out), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype)
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.shape[i]

    def bwd(g):
        if axis is None:
            gg = g
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            gg = g if keepdims else np.expand_dims(g, ax)
        return ((np.broadcast_to(gg, a.shape) / count).astype(a.dtype, copy=False),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def power(a, p) -> Tensor:
    """Elementwise x**p with constant float p. Fractional p needs x > 0."""
    a = _wrap(a)
    p = float(p)
    out = np.power(a.data, p)

    def bwd(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _node(out.astype(a.dtype, copy=False), (a,), bwd)


def absolute(a) -> Tensor:
    a = _wrap(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)  # subgradient 0 at the kink

    def bwd(g):
        return (g * sign,)

    return _node(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _wrap(a)
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0).astype(a.dtype, copy=False)

    def bwd(g):
        return (np.where(keep, g, 0.0).astype(a.dtype, copy=False),)

    return _node(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_np(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _wrap(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _node(out, (a,), bwd)


def embedding(table: Parameter, indices) -> Tensor:
    """Row gather from a (vocab, dim) table; backward scatters with np.add.at."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(np.ascontiguousarray(out), (table,), bwd)


def masked_softmax(logits, allow) -> Tensor:
    """Softmax over the allowed entries of the last axis.

    Blocked entries get probability exactly 0.0 (they are set to -inf before
    the max-subtraction, so exp gives a true zero) and receive no gradient.
    Rows with no allowed entry produce all-zero rows rather than NaN.
    """
    logits = _wrap(logits)
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), logits.shape)
    neg = np.array(-np.inf, dtype=logits.dtype)
    masked = np.where(allow, logits.data, neg)
    rowmax = masked.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    p = np.exp(masked - rowmax)
    denom = p.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    p = p / denom

    def bwd(g):
        inner = (p * g).sum(axis=-1, keepdims=True)
        return (_unbroadcast(p * (g - inner), logits.shape),)

    return _node(p.astype(logits.dtype, copy=False), (logits,), bwd)


# -- composed ops used by every model --------------------------------------

def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * gain, normalizing each row."""
    x = _wrap(x)
    ms = reduce_mean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, _const(eps, x.dtype)), -0.5)
    return mul(mul(x, inv), gain)


def swiglu_ffn(x, w_in_a, w_in_b, w_out) -> Tensor:
    """w_out applied to silu(x @ w_in_a) * (x @ w_in_b)."""
    return matmul(mul(silu(matmul(x, w_in_a)), matmul(x, w_in_b)), w_out)


def attention(q, k, v, mask, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a boolean mask.

    q: (..., L_q, d), k/v: (..., L_k, d), mask: AttnMask or bool array
    broadcastable to (..., heads, L_q, L_k). Scale is 1/sqrt(d/heads).
    Fully-masked query rows yield zero vectors.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d = q.shape[-1]
    if d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by heads {heads}")
    dh = d // heads
    allow = mask.allow if isinstance(mask, AttnMask) else np.asarray(mask, dtype=bool)

    def split_heads(t):
        *batch, L, _ = t.shape
        perm = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return transpose(reshape(t, (*batch, L, heads, dh)), perm)

    qh = split_heads(q)  # (..., H, L_q, dh)
    kh = split_heads(k)
    vh = split_heads(v)
    scale = _const(np.asarray(1.0 / math.sqrt(dh), dtype=q.dtype), q.dtype)
    scores = mul(matmul(qh, transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))), scale)
    if allow.ndim == 2:
        allow = allow[(np.newaxis,) * (scores.ndim - 2)]
    weights = masked_softmax(scores, allow)
    out = matmul(weights, vh)  # (..., H, L_q, dh)
    *batch, H, L_q, _ = out.shape
    nb = len(batch)
    out = transpose(out, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    return reshape(out, (*batch, L_q, d))
