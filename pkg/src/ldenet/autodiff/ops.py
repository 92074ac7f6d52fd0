"""Differentiable primitives.

Image tensors are ``(H, W, C)`` or batched ``(B, H, W, C)``; spatial ops
accept either and return the same rank they were given.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "operands cannot be broadcast together", a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result(x.data * x.dtype.type(s), (x,), lambda g: (g * s,), "scale")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result(xd * cdf, (x,), back, "gelu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    # subgradient 0 at 0
    return make_result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return make_result(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,), "clamp")


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return make_result(out, (x,), lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.data.size // max(out.size, 1)

    def back(g):
        return (_expand_reduced(g / n, shape, axis, keepdims).copy(),)

    return make_result(out, (x,), back, "mean")


def abs_sum(x: Tensor) -> Tensor:
    """L1 norm: sum of absolute values."""
    xd = x.data
    return make_result(np.asarray(np.abs(xd).sum()), (x,), lambda g: (g * np.sign(xd),), "abs_sum")


def abs_mean(x: Tensor) -> Tensor:
    """Mean absolute value (element-count-normalized L1)."""
    xd = x.data
    n = xd.size
    return make_result(np.asarray(np.abs(xd).mean()), (x,), lambda g: (g * np.sign(xd) / n,), "abs_mean")


def square_mean(x: Tensor) -> Tensor:
    """Mean squared value (MSE against zero)."""
    xd = x.data
    n = xd.size
    return make_result(np.asarray((xd * xd).mean()), (x,), lambda g: (g * 2.0 * xd / n,), "square_mean")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {tuple(shape)}", src) from None
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return make_result(x.data[idx], (x,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", f"extents differ off axis {axis}", *(t.shape for t in tensors))
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def pad_reflect(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Reflective padding of the two spatial axes (numpy ``reflect`` mode)."""
    xd = x.data
    ha, wa = xd.ndim - 3, xd.ndim - 2
    widths = [(0, 0)] * xd.ndim
    widths[ha], widths[wa] = tuple(pad_h), tuple(pad_w)
    out = np.pad(xd, widths, mode="reflect")
    idx_h = np.pad(np.arange(xd.shape[ha]), pad_h, mode="reflect")
    idx_w = np.pad(np.arange(xd.shape[wa]), pad_w, mode="reflect")

    def back(g):
        gh_shape = list(g.shape)
        gh_shape[ha] = xd.shape[ha]
        gh = np.zeros(gh_shape, dtype=g.dtype)
        lead = (slice(None),) * ha
        np.add.at(gh, lead + (idx_h,), g)
        gx = np.zeros(xd.shape, dtype=g.dtype)
        lead = (slice(None),) * wa
        np.add.at(gx, lead + (idx_w,), gh)
        return (gx,)

    return make_result(out, (x,), back, "pad_reflect")


# ---------------------------------------------------------------------------
# linear algebra / normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner extents disagree", a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), back, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NonFiniteError("softmax", "NaN input")
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the trailing (channel) axis at every position."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", "gamma/beta must match channel count", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    red = tuple(range(xd.ndim - 1))

    def back(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            dxh = g * gd
            gx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), back, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_NORM_EPS) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = xd / denom
    live = norm > eps

    def back(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, g - out * proj, g) / denom,)

    return make_result(out, (x,), back, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution and spatial rearrangement
# ---------------------------------------------------------------------------

def _batched(op: str, x: Tensor) -> tuple[np.ndarray, bool]:
    xd = x.data
    if xd.ndim == 3:
        return xd[None], True
    if xd.ndim != 4:
        raise ShapeError(op, "expected HxWxC or BxHxWxC input", x.shape)
    return xd, False


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


class _FlatTaps:
    """Stride-1 kernel taps as contiguous slices of a flattened padded image.

    With the padded image stored row-major as ``(B, Hp*Wp, C)``, tap ``(i, j)``
    of every output position ``(h, w)`` lives at flat index
    ``(h + i)*Wp + (w + j)``, so each tap is one contiguous slice of length
    ``L = (Ho - 1)*Wp + Wo``. Results are accumulated on a ``Ho x Wp`` grid and
    the ``Wp - Wo`` wrap-around columns are cropped.
    """

    def __init__(self, shape: tuple[int, int, int, int], k: int, pad: int):
        B, H, W, C = shape
        self.B, self.H, self.W, self.C, self.k, self.pad = B, H, W, C, k, pad
        self.Hp, self.Wp = H + 2 * pad, W + 2 * pad
        self.Ho, self.Wo = self.Hp - k + 1, self.Wp - k + 1
        self.L = (self.Ho - 1) * self.Wp + self.Wo
        self.offsets = [(i, j, i * self.Wp + j) for i in range(k) for j in range(k)]

    def flatten(self, xd: np.ndarray) -> np.ndarray:
        p = self.pad
        if p:
            xd = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
        return np.ascontiguousarray(xd).reshape(self.B, self.Hp * self.Wp, xd.shape[-1])

    def wide(self, channels: int, dtype) -> np.ndarray:
        return np.zeros((self.B, self.Ho * self.Wp, channels), dtype=dtype)

    def crop(self, wide: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(wide.reshape(self.B, self.Ho, self.Wp, -1)[:, :, :self.Wo])

    def widen(self, g: np.ndarray) -> np.ndarray:
        gw = np.zeros((self.B, self.Ho, self.Wp, g.shape[-1]), dtype=g.dtype)
        gw[:, :, :self.Wo] = g
        return gw.reshape(self.B, self.Ho * self.Wp, -1)[:, :self.L]

    def unflatten(self, gxf: np.ndarray) -> np.ndarray:
        p = self.pad
        return gxf.reshape(self.B, self.Hp, self.Wp, -1)[:, p:p + self.H, p:p + self.W]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; ``w`` is ``k x k x c_in x c_out``."""
    xd, squeeze = _batched("conv2d", x)
    wd = w.data
    if wd.ndim != 4 or wd.shape[0] != wd.shape[1] or wd.shape[0] % 2 == 0:
        raise ShapeError("conv2d", "weight must be k x k x c_in x c_out with odd k", w.shape)
    if xd.shape[-1] != wd.shape[2]:
        raise ShapeError("conv2d", "input channels do not match weight c_in", x.shape, w.shape)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    k, cin, cout = wd.shape[0], wd.shape[2], wd.shape[3]
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d", "bias must have c_out entries", b.shape, w.shape)
    B, H, W, _ = xd.shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", "kernel larger than padded input", x.shape, w.shape)

    if k == 1 and stride == 1 and pad == 0:
        w2 = wd[0, 0]
        out = xd @ w2

        def back(g):
            gx = (g @ w2.T) if x.requires_grad else None
            gw = np.tensordot(xd, g, axes=([0, 1, 2], [0, 1, 2]))[None, None] if w.requires_grad else None
            return gx, gw
    elif stride == 1:
        taps = _FlatTaps(xd.shape, k, pad)
        xf = taps.flatten(xd)
        L = taps.L
        wide = taps.wide(cout, np.result_type(xd, wd))
        acc = wide[:, :L]
        for i, j, off in taps.offsets:
            acc += xf[:, off:off + L] @ wd[i, j]
        out = taps.crop(wide)

        def back(g):
            gl = taps.widen(g)
            gx = gw = None
            if w.requires_grad:
                gw = np.empty_like(wd)
                for i, j, off in taps.offsets:
                    acc_w = xf[0, off:off + L].T @ gl[0]
                    for bi in range(1, B):
                        acc_w += xf[bi, off:off + L].T @ gl[bi]
                    gw[i, j] = acc_w
            if x.requires_grad:
                gxf = np.zeros(xf.shape, dtype=g.dtype)
                for i, j, off in taps.offsets:
                    gxf[:, off:off + L] += gl @ wd[i, j].T
                gx = taps.unflatten(gxf)
            return gx, gw
    else:
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = win.reshape(B * Ho * Wo, cin * k * k)
        wmat = wd.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
        out = (cols @ wmat).reshape(B, Ho, Wo, cout)

        def back(g):
            gf = g.reshape(-1, cout)
            gx = gw = None
            if w.requires_grad:
                gw = (cols.T @ gf).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
            if x.requires_grad:
                dcols = (gf @ wmat.T).reshape(B, Ho, Wo, cin, k, k)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[..., i, j]
                gx = gxp[:, pad:pad + H, pad:pad + W, :]
            return gx, gw

    if b is not None:
        out = out + b.data

    def back_all(g):
        g4 = g[None] if squeeze else g
        gx, gw = back(g4)
        if gx is not None and squeeze:
            gx = gx[0]
        gb = g4.sum(axis=(0, 1, 2)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) + ((b,) if b is not None else ())
    return make_result(out[0] if squeeze else out, parents, back_all, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel spatial filtering; ``w`` is ``k x k x c``."""
    xd, squeeze = _batched("depthwise_conv2d", x)
    wd = w.data
    if wd.ndim != 3 or wd.shape[0] != wd.shape[1]:
        raise ShapeError("depthwise_conv2d", "weight must be k x k x c", w.shape)
    if xd.shape[-1] != wd.shape[2]:
        raise ShapeError("depthwise_conv2d", "channel count mismatch", x.shape, w.shape)
    if b is not None and b.shape != (wd.shape[2],):
        raise ShapeError("depthwise_conv2d", "bias must have c entries", b.shape, w.shape)
    k = wd.shape[0]
    B, H, W, C = xd.shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError("depthwise_conv2d", "kernel larger than padded input", x.shape, w.shape)
    dtype = np.result_type(xd, wd)

    if stride == 1:
        taps = _FlatTaps(xd.shape, k, pad)
        xf = taps.flatten(xd)
        L = taps.L
        wide = taps.wide(C, dtype)
        acc = wide[:, :L]
        tmp = np.empty_like(acc)
        for i, j, off in taps.offsets:
            np.multiply(xf[:, off:off + L], wd[i, j], out=tmp)
            acc += tmp
        out = taps.crop(wide)

        def back(g):
            gl = taps.widen(g)
            gx = gw = None
            if w.requires_grad:
                gw = np.empty_like(wd)
                for i, j, off in taps.offsets:
                    gw[i, j] = np.einsum("blc,blc->c", gl, xf[:, off:off + L])
            if x.requires_grad:
                gxf = np.zeros(xf.shape, dtype=g.dtype)
                t = np.empty_like(gl)
                for i, j, off in taps.offsets:
                    np.multiply(gl, wd[i, j], out=t)
                    gxf[:, off:off + L] += t
                gx = taps.unflatten(gxf)
            return gx, gw
    else:
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
        hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        out = np.zeros((B, Ho, Wo, C), dtype=dtype)
        for i in range(k):
            for j in range(k):
                out += xp[:, i:i + hs:stride, j:j + ws:stride, :] * wd[i, j]

        def back(g):
            gx = gw = None
            if w.requires_grad:
                gw = np.empty_like(wd)
                for i in range(k):
                    for j in range(k):
                        gw[i, j] = np.einsum("bhwc,bhwc->c", g, xp[:, i:i + hs:stride, j:j + ws:stride, :])
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + hs:stride, j:j + ws:stride, :] += g * wd[i, j]
                gx = gxp[:, pad:pad + H, pad:pad + W, :]
            return gx, gw

    if b is not None:
        out += b.data

    def back_all(g):
        g4 = g[None] if squeeze else g
        gx, gw = back(g4)
        if gx is not None and squeeze:
            gx = gx[0]
        gb = g4.sum(axis=(0, 1, 2)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) + ((b,) if b is not None else ())
    return make_result(out[0] if squeeze else out, parents, back_all, "depthwise_conv2d")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Fold ``r x r`` spatial blocks into channels.

    Output channel ``c*r*r + i*r + j`` holds input channel ``c`` at block
    offset ``(i, j)``.
    """
    xd, squeeze = _batched("pixel_unshuffle", x)
    B, H, W, C = xd.shape
    if H % r or W % r:
        raise ShapeError("pixel_unshuffle", f"spatial extents must be divisible by r={r}", x.shape)
    out = xd.reshape(B, H // r, r, W // r, r, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // r, W // r, C * r * r)
    shape = x.shape

    def back(g):
        g4 = g[None] if squeeze else g
        gx = g4.reshape(B, H // r, W // r, C, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx.reshape(shape),)

    return make_result(out[0] if squeeze else out, (x,), back, "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    xd, squeeze = _batched("pixel_shuffle", x)
    B, h, w, Cr = xd.shape
    if Cr % (r * r):
        raise ShapeError("pixel_shuffle", f"channels must be divisible by r^2={r * r}", x.shape)
    C = Cr // (r * r)
    out = xd.reshape(B, h, w, C, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(B, h * r, w * r, C)
    shape = x.shape

    def back(g):
        g4 = g[None] if squeeze else g
        gx = g4.reshape(B, h, r, w, r, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, h, w, Cr)
        return (gx.reshape(shape),)

    return make_result(out[0] if squeeze else out, (x,), back, "pixel_shuffle")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``(..., H, W, C) -> (..., C)``."""
    if x.ndim < 3:
        raise ShapeError("global_avg_pool", "expected HxWxC input", x.shape)
    xd = x.data
    H, W = xd.shape[-3], xd.shape[-2]
    shape = xd.shape

    def back(g):
        return (np.broadcast_to(g[..., None, None, :] / (H * W), shape).copy(),)

    return make_result(xd.mean(axis=(-3, -2)), (x,), back, "global_avg_pool")


__all__ = [
    "abs", "abs_mean", "abs_sum", "add", "clamp", "concat", "conv2d", "depthwise_conv2d", "div",
    "exp", "gelu", "getitem", "global_avg_pool", "l2_normalize", "layer_norm", "matmul", "mean",
    "mul", "neg", "pad_reflect", "pixel_shuffle", "pixel_unshuffle", "relu", "reshape", "scale",
    "sigmoid", "softmax", "sqrt", "square", "square_mean", "sub", "sum", "swap_last", "transpose",
]
