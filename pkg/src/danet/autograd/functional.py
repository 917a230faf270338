"""Forward operators with their backward rules.

Every op takes :class:`Tensor` (or scalar) inputs and returns a new Tensor;
the backward closure receives the output gradient as a numpy array and
returns one gradient (or ``None``) per input.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


# ---------------------------------------------------------------------------
# op accounting
# ---------------------------------------------------------------------------

_trace = threading.local()


class OpTrace:
    """Tallies multiply-accumulates and elementwise ops of executed forwards."""

    def __init__(self):
        self.macs = {}
        self.elementwise = {}
        self.scope: list = []

    def _key(self) -> str:
        # attribute ops to the root module's direct child when there is one
        if len(self.scope) > 1:
            return self.scope[1]
        return self.scope[0] if self.scope else ""

    def add(self, macs: int = 0, elementwise: int = 0) -> None:
        k = self._key()
        self.macs[k] = self.macs.get(k, 0) + int(macs)
        self.elementwise[k] = self.elementwise.get(k, 0) + int(elementwise)


@contextmanager
def trace_ops() -> Iterator[OpTrace]:
    prev = getattr(_trace, "active", None)
    tr = OpTrace()
    _trace.active = tr
    try:
        yield tr
    finally:
        _trace.active = prev


def active_trace() -> Optional[OpTrace]:
    return getattr(_trace, "active", None)


def _count(macs: int = 0, elementwise: int = 0) -> None:
    tr = getattr(_trace, "active", None)
    if tr is not None:
        tr.add(macs, elementwise)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _lift(a, b):
    """Promote scalars to arrays of the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op}: expected rank-{rank} input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data + b.data
    _count(elementwise=out.size)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(out, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data - b.data
    _count(elementwise=out.size)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(out, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data * b.data
    _count(elementwise=out.size)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), "mul", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    _count(elementwise=out.size)
    return make_result(out, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    _count(elementwise=out.size)
    return make_result(out, (x,), "sigmoid", lambda g: (g * out * (1 - out),))


def minimum(x: Tensor, limit: float) -> Tensor:
    """Elementwise ``min(x, limit)``; gradient 1 below the limit, 0 at or above it."""
    below = x.data < limit
    out = np.where(below, x.data, np.asarray(limit, x.dtype))
    _count(elementwise=out.size)
    return make_result(out, (x,), "minimum", lambda g: (g * below,))


def lerp(a, b, w) -> Tensor:
    """``b + w * (a - b)``, i.e. ``w * a + (1 - w) * b`` for weights in [0, 1].

    Each element is evaluated from its nearer endpoint (``a`` when w > 0.5),
    so the rounded result never leaves the interval between ``a`` and ``b``.
    """
    a, b = _lift(a, b)
    w = as_tensor(w)
    if not (a.shape == b.shape and np.broadcast_shapes(w.shape, a.shape) == a.shape):
        raise ShapeError(f"lerp: endpoints {a.shape} and {b.shape} with weights {w.shape}")
    dtype = np.result_type(a.dtype, b.dtype, w.dtype)
    ad, bd, wd = a.data.astype(dtype, copy=False), b.data.astype(dtype, copy=False), w.data.astype(dtype, copy=False)
    near_a = wd > 0.5
    out = np.where(near_a, ad + (1 - wd) * (bd - ad), bd + wd * (ad - bd))
    _count(elementwise=3 * out.size)

    def bw(g):
        ga = unbroadcast(g * wd, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * (1 - wd), b.shape) if b.requires_grad else None
        gw = unbroadcast(g * (ad - bd), w.shape) if w.requires_grad else None
        return ga, gb, gw

    return make_result(out.astype(dtype, copy=False), (a, b, w), "lerp", bw)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    # np.sign(0) == 0, so the subgradient at the kink is 0.
    sign = np.sign(x.data)
    out = np.abs(x.data)
    _count(elementwise=out.size)
    return make_result(out, (x,), "abs", lambda g: (g * sign,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "abs":
        return abs(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype)
    return make_result(out, (x,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=x.dtype), dtype=x.dtype)
    return make_result(out, (x,), "mean", lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def sum_axes(x: Tensor, axes: tuple, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), "sum_axes", bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW maps along channels; ``a`` comes first."""
    _check_rank(a, 4, "concat_channels")
    _check_rank(b, 4, "concat_channels")
    for axis, label in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {label} mismatch ({a.shape[axis]} vs {b.shape[axis]})"
            )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), "concat", lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank(x, 4, "slice_channels")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(x.data[:, start:stop], (x,), "slice_channels", bw)


def crop_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window of an NCHW map."""
    if height > x.shape[2] or width > x.shape[3]:
        raise ShapeError(f"crop_spatial: {height}x{width} exceeds {x.shape[2]}x{x.shape[3]}")
    if (height, width) == x.shape[2:]:
        return x

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return make_result(x.data[:, :, :height, :width], (x,), "crop", bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling: every value fills a 2x2 block."""
    _check_rank(x, 4, "upsample2x")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), "upsample2x", bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(size: int, k: int, stride: int, padding: int, op: str, dim: str) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(f"{op}: {dim}={size} too small for kernel {k} with padding {padding}")
    return out


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    _check_rank(x, 4, "conv2d")
    _check_rank(w, 4, "conv2d weight")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels Cin={cin} but weight expects Cin={wcin}")
    if kh < 1 or kw < 1:
        raise ShapeError(f"conv2d: kernel must be at least 1x1, got {kh}x{kw}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match Cout={cout}")
    ho = _out_size(h, kh, stride, padding, "conv2d", "H")
    wo = _out_size(wd, kw, stride, padding, "conv2d", "W")
    dtype = np.result_type(*(t.dtype for t in (x, w, b) if t is not None))
    xd = x.data.astype(dtype, copy=False)
    wdat = w.data.astype(dtype, copy=False)
    _count(macs=n * cout * cin * kh * kw * ho * wo)

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        xs = np.ascontiguousarray(xs).reshape(n, cin, ho * wo)
        w2 = wdat.reshape(cout, cin)
        out = np.matmul(w2, xs).reshape(n, cout, ho, wo)

        def bw(g):
            g2 = g.reshape(n, cout, ho * wo)
            gw = np.einsum("nop,nip->oi", g2, xs).reshape(w.shape) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                gxs = np.matmul(w2.T, g2).reshape(n, cin, ho, wo)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
            return gx, gw, gb
    else:
        xp = _pad(xd, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # cols: (N, Ho, Wo, Cin*kh*kw)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
        w2 = wdat.reshape(cout, cin * kh * kw)
        out = (cols @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)

        def bw(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                dcols = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
            return gx, gw, gb

    if b is not None:
        out = out + b.data.astype(dtype, copy=False)[None, :, None, None]
        _count(elementwise=out.size)
    inputs = (x, w, b) if b is not None else (x, w)
    if b is None:
        inner = bw
        bw = lambda g: inner(g)[:2]  # noqa: E731
    return make_result(out, inputs, "conv2d", bw)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                     padding: Optional[int] = None) -> Tensor:
    """Per-channel convolution: ``w[C,1,k,k]`` holds one filter per input channel."""
    _check_rank(x, 4, "depthwise_conv2d")
    _check_rank(w, 4, "depthwise_conv2d weight")
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {w.shape} needs one filter per channel (C={c})")
    k, k2 = w.shape[2], w.shape[3]
    if k != k2:
        raise ShapeError(f"depthwise_conv2d: kernel must be square, got {k}x{k2}")
    if padding is None:
        padding = k // 2
    ho = _out_size(h, k, stride, padding, "depthwise_conv2d", "H")
    wo = _out_size(wd, k, stride, padding, "depthwise_conv2d", "W")
    dtype = np.result_type(*(t.dtype for t in (x, w, b) if t is not None))
    xp = _pad(x.data.astype(dtype, copy=False), padding)
    wdat = w.data.astype(dtype, copy=False)
    _count(macs=n * c * k * k * ho * wo)
    out = np.zeros((n, c, ho, wo), dtype=dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * wdat[None, :, 0, i, j, None, None]

    def bw(g):
        gw = None
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, patch)
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * wdat[None, :, 0, i, j, None, None]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    if b is not None:
        if b.shape != (c,):
            raise ShapeError(f"depthwise_conv2d: bias shape {b.shape} does not match C={c}")
        out += b.data.astype(dtype, copy=False)[None, :, None, None]
        _count(elementwise=out.size)
    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, inputs, "depthwise_conv2d", bw)


# ---------------------------------------------------------------------------
# normalization, pooling, dense
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over N, H, W.

    In training mode the batch moments are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, exponential
    average with ``momentum``).
    """
    if eps <= 0:
        raise ValueError(f"batchnorm: eps must be positive, got {eps}")
    _check_rank(x, 4, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: parameters of length {gamma.shape[0]} for C={c}")
    dtype = np.result_type(x.dtype, gamma.dtype, beta.dtype)
    xd = x.data.astype(dtype, copy=False)
    _count(elementwise=xd.size)
    gd = gamma.data.astype(dtype, copy=False)[None, :, None, None]
    bd = beta.data.astype(dtype, copy=False)[None, :, None, None]
    axes = (0, 2, 3)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gd + bd
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)

        def bw(g):
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gb = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * gd
                gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, gg, gb
    else:
        inv = (1.0 / np.sqrt(running_var.astype(dtype) + eps))[None, :, None, None]
        xhat = (xd - running_mean.astype(dtype)[None, :, None, None]) * inv
        out = xhat * gd + bd

        def bw(g):
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gb = g.sum(axis=axes) if beta.requires_grad else None
            gx = g * gd * inv if x.requires_grad else None
            return gx, gg, gb

    return make_result(out.astype(dtype, copy=False), (x, gamma, beta), "batchnorm", bw)


def max_pool3x3s2(x: Tensor) -> Tensor:
    """3x3 max pooling, stride 2, padding 1. Ties go to the first row-major position."""
    _check_rank(x, 4, "max_pool")
    n, c, h, w = x.shape
    ho = _out_size(h, 3, 2, 1, "max_pool", "H")
    wo = _out_size(w, 3, 2, 1, "max_pool", "W")
    xp = _pad(x.data, 1, value=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, 9)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    _count(elementwise=out.size * 9)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(9):
            i, j = divmod(idx, 3)
            sel = arg == idx
            if sel.any():
                gxp[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2] += g * sel
        return (gxp[:, :, 1:1 + h, 1:1 + w],)

    return make_result(np.ascontiguousarray(out), (x,), "max_pool", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _count(elementwise=x.size)
    return make_result(out, (x,), "gap", lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def pool(x: Tensor, kind: str) -> Tensor:
    if kind == "max3x3s2":
        return max_pool3x3s2(x)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pool kind {kind!r}")


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x[N,Cin] @ w[Cout,Cin].T + b``."""
    _check_rank(x, 2, "fully_connected")
    _check_rank(w, 2, "fully_connected weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input has Cin={x.shape[1]} but weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {b.shape} does not match Cout={w.shape[0]}")
    dtype = np.result_type(*(t.dtype for t in (x, w, b) if t is not None))
    xd = x.data.astype(dtype, copy=False)
    wd = w.data.astype(dtype, copy=False)
    out = xd @ wd.T
    _count(macs=x.shape[0] * w.shape[0] * w.shape[1])
    if b is not None:
        out = out + b.data.astype(dtype, copy=False)
        _count(elementwise=out.size)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_result(out, inputs, "fc", bw)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    return make_result(out, (x,), "square", lambda g: (2 * g * x.data,))

