"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
op records a closure that maps the output gradient to input gradients.
:func:`backward` walks that record in reverse topological order.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

_GRAD_ENABLED = True
_FLOP_TRACE: list | None = None
_SCOPE: list[str] = []
_SHAPE_ONLY = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def trace_flops(execute: bool = True):
    """Collect ``(layer_name, kind, flops)`` records from conv and scan ops.

    With ``execute=False`` conv and scan skip their arithmetic and return zeros
    of the right shape, which keeps large-input estimates cheap.
    """
    global _FLOP_TRACE, _SHAPE_ONLY
    prev, prev_mode = _FLOP_TRACE, _SHAPE_ONLY
    records: list = []
    _FLOP_TRACE = records
    _SHAPE_ONLY = not execute
    try:
        yield records
    finally:
        _FLOP_TRACE, _SHAPE_ONLY = prev, prev_mode


@contextlib.contextmanager
def scope(name: str):
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def _record_flops(kind: str, flops: int) -> None:
    if _FLOP_TRACE is not None:
        _FLOP_TRACE.append((".".join(_SCOPE), kind, int(flops)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), bw)


def maximum(a, b) -> Tensor:
    a, b = _coerce(a, b)
    mask = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _coerce(a, b)
    mask = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(np.minimum(a.data, b.data), (a, b), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo

    def bw(g):
        return (g * mask,)

    return _make(np.maximum(a.data, lo), (a,), bw)


# -- pointwise nonlinearities ----------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(x.data * s, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def bw(g):
        return (g * e,)

    return _make(e, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bw)


def softplus(x: Tensor) -> Tensor:
    def bw(g):
        return (g * _sigmoid_np(x.data),)

    return _make(_softplus_np(x.data), (x,), bw)


def arctan(x: Tensor) -> Tensor:
    def bw(g):
        return (g / (1.0 + x.data * x.data),)

    return _make(np.arctan(x.data), (x,), bw)


_POINTWISE = {"silu": silu, "sigmoid": sigmoid, "relu": relu, "exp": exp, "softplus": softplus}


def pointwise(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise kind {kind!r}") from None
    return fn(x)


# -- shape manipulation ----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ContractError(f"split sizes {list(sizes)} do not cover axis {axis} of length {x.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(sl)))
        start += n
    return out


def take_sequences(x: Tensor, perms: np.ndarray) -> Tensor:
    """Reorder the last axis of ``x`` (shape ``(N, K, c, L)``) by per-group permutations.

    ``out[n, k, c, l] = x[n, k, c, perms[k, l]]``; ``perms`` has shape ``(K, L)``
    and each row must be a permutation of ``range(L)``.
    """
    perms = np.asarray(perms)
    inv = np.argsort(perms, axis=1)
    idx = perms[None, :, None, :]

    def bw(g):
        return (np.take_along_axis(g, inv[None, :, None, :], axis=-1),)

    return _make(np.take_along_axis(x.data, np.broadcast_to(idx, x.shape), axis=-1), (x,), bw)


# -- reductions and products -----------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


# -- normalization -----------------------------------------------------------

def norm(x: Tensor, kind: str, scale: Tensor, shift: Tensor, eps: float = 1e-5, groups: int = 1) -> Tensor:
    """Layer norm over the channel axis, or group norm over ``(C/g, H, W)``.

    For layer norm the channel axis is 1 (0 for a 1-D input); ``scale`` and
    ``shift`` have one entry per channel in both cases.
    """
    if kind == "layer":
        cax = 0 if x.ndim == 1 else 1
        C = x.shape[cax]
        xs = x.data
        axes = (cax,)
        grouped_shape = None
    elif kind == "group":
        if x.ndim < 2:
            raise ContractError("group norm needs a channel axis")
        cax = 1
        C = x.shape[1]
        if groups < 1 or C % groups:
            raise ConfigurationError(f"group norm: {groups} groups do not divide {C} channels")
        grouped_shape = (x.shape[0], groups, -1)
        xs = x.data.reshape(grouped_shape)
        axes = (2,)
    else:
        raise ConfigurationError(f"unknown norm kind {kind!r}")
    if scale.shape != (C,) or shift.shape != (C,):
        raise ContractError(f"norm affine params must have shape ({C},), got {scale.shape}/{shift.shape}")

    mu = xs.mean(axis=axes, keepdims=True)
    xc = xs - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if grouped_shape is not None:
        xhat = xhat.reshape(x.shape)
    bshape = [1] * x.ndim
    bshape[cax] = C
    sc = scale.data.reshape(bshape)
    out = xhat * sc + shift.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != cax)

    def bw(g):
        gscale = (g * xhat).sum(axis=red)
        gshift = g.sum(axis=red)
        gxhat = g * sc
        if grouped_shape is not None:
            gxhat = gxhat.reshape(grouped_shape)
            xh = xhat.reshape(grouped_shape)
        else:
            xh = xhat
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True) - xh * (gxhat * xh).mean(axis=axes, keepdims=True))
        return gx.reshape(x.shape), gscale, gshift

    return _make(out, (x, scale, shift), bw)


# -- pooling and resampling --------------------------------------------------

def pool(x: Tensor, kind: str) -> Tensor:
    if x.ndim != 4:
        raise ContractError(f"pool expects N×C×H×W, got shape {x.shape}")
    if kind == "global_avg":
        axes = (2, 3)
    elif kind == "avg_h":
        axes = (2,)
    elif kind == "avg_w":
        axes = (3,)
    else:
        raise ConfigurationError(f"unknown pool kind {kind!r}")
    return tmean(x, axes, keepdims=True)


def max_pool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    N, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros_like(xp)
        di, dj = np.divmod(arg, k)
        hi = np.arange(Ho)[:, None] * stride + di
        wj = np.arange(Wo)[None, :] * stride + dj
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        np.add.at(gp, (n_idx, c_idx, hi, wj), g)
        return (gp[:, :, padding : padding + H, padding : padding + W],)

    return _make(np.ascontiguousarray(out), (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ContractError(f"upsample factor must be ≥ 1, got {factor}")
    if factor == 1:
        return x
    N, C, H, W = x.shape

    def bw(g):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _make(out, (x,), bw)


# -- convolution ----------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over an N×C×H×W input.

    Computed as a sum over the k×k kernel taps of strided (grouped) matmuls,
    so no im2col buffer is materialized.
    """
    if x.ndim != 4:
        raise ContractError(f"conv2d input must be N×C×H×W, got shape {x.shape}")
    if w.ndim != 4:
        raise ContractError(f"conv2d weight must be C_out×C_in/g×k×k, got shape {w.shape}")
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigurationError(f"conv2d: groups={groups} must divide C_in={C} and C_out={O}")
    if Cg != C // groups:
        raise ContractError(f"conv2d: input channel dim {C}/{groups} != weight dim 1 ({Cg})")
    if kh != kw or kh < 1:
        raise ContractError(f"conv2d: kernel must be square and ≥ 1, got {kh}×{kw}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} / padding {padding} out of range")
    if bias is not None and bias.shape != (O,):
        raise ContractError(f"conv2d: bias dim 0 ({bias.shape}) != C_out {O}")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ContractError(f"conv2d: kernel {k} larger than padded input {H}×{W}")
    _record_flops("conv", 2 * N * Cg * O * k * k * Ho * Wo)
    if _SHAPE_ONLY:
        return Tensor(np.zeros((N, O, Ho, Wo), dtype=x.dtype))

    g_ = groups
    Og = O // g_
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xg = xp.reshape(N, g_, Cg, xp.shape[2], xp.shape[3])
    wg = w.data.reshape(g_, Og, Cg, k, k)
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    depthwise = Cg == 1 and Og == 1

    out = np.zeros((N, g_, Og, Ho * Wo), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        for j in range(k):
            patch = xg[:, :, :, i : i + hs : stride, j : j + ws : stride].reshape(N, g_, Cg, Ho * Wo)
            if depthwise:
                out += wg[None, :, :, 0, i, j, None] * patch
            else:
                out += wg[None, :, :, :, i, j] @ patch
    out = out.reshape(N, O, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def bw(gout):
        gg = gout.reshape(N, g_, Og, Ho * Wo)
        gxp = np.zeros_like(xg) if x.requires_grad else None
        gw = np.zeros_like(wg) if w.requires_grad else None
        for i in range(k):
            for j in range(k):
                if gw is not None:
                    patch = xg[:, :, :, i : i + hs : stride, j : j + ws : stride].reshape(N, g_, Cg, Ho * Wo)
                    if depthwise:
                        gw[:, :, 0, i, j] = (gg * patch).sum(axis=(0, 3))
                    else:
                        gw[:, :, :, i, j] = (gg @ np.swapaxes(patch, -1, -2)).sum(axis=0)
                if gxp is not None:
                    if depthwise:
                        contrib = wg[None, :, :, 0, i, j, None] * gg
                    else:
                        contrib = np.swapaxes(wg[None, :, :, :, i, j], -1, -2) @ gg
                    gxp[:, :, :, i : i + hs : stride, j : j + ws : stride] += contrib.reshape(N, g_, Cg, Ho, Wo)
        grads = []
        if gxp is not None:
            gx = gxp.reshape(xp.shape)
            if padding:
                gx = gx[:, :, padding : padding + H, padding : padding + W]
            grads.append(gx)
        else:
            grads.append(None)
        grads.append(gw.reshape(w.shape) if gw is not None else None)
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw)


def conv2d_reference(x: np.ndarray, w: np.ndarray, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Direct nested-loop convolution, kept as the test oracle for :func:`conv2d`."""
    N, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    Og = O // groups
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((N, O, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for o in range(O):
            grp = o // Og
            for oh in range(Ho):
                for ow in range(Wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(Cg):
                        ci = grp * Cg + c
                        for i in range(k):
                            hi = oh * stride + i - padding
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(k):
                                wj = ow * stride + j - padding
                                if 0 <= wj < W:
                                    acc += x[n, ci, hi, wj] * w[o, c, i, j]
                    out[n, o, oh, ow] = acc
    return out


# -- losses ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (unreduced)."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        return (g * (_sigmoid_np(z) - t),)

    return _make(loss, (logits,), bw)


# -- parameter containers and backward ---------------------------------------

class ParamStore(OrderedDict):
    """Ordered mapping of dotted parameter names to leaf tensors."""

    def __setitem__(self, name, value):
        if name in self:
            raise ContractError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            raise ContractError(f"parameter {name!r} must be a Tensor")
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def numel(self) -> int:
        return sum(t.size for t in self.values())


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | ParamStore | None = None) -> None:
    """Accumulate ∂loss/∂leaf into ``.grad`` of every leaf reached by the graph.

    ``params`` is accepted for symmetry with the optimizer loop; every
    ``requires_grad`` leaf in the graph receives its gradient whether or not
    it is listed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


def iter_leaves(t: Tensor) -> Iterator[Tensor]:
    for node in _topo_order(t):
        if node._backward is None and node.requires_grad:
            yield node
