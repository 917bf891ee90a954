"""Structured neural operations over NCHW tensors.

Convolutions use same-size reflect padding and the cross-correlation
convention; pooling and interpolation are the 2x building blocks of the
multi-level head cascade.  Every op is differentiable through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import instrument
from .errors import ShapeError
from .tensor import Tensor, _make, reshape, transpose

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ConvSpec:
    """Stride-1 convolution shape contract; groups is 1 or in_ch (depthwise)."""

    in_ch: int
    out_ch: int
    kernel: int
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ShapeError(f"kernel must be odd, got {self.kernel}")
        if self.groups not in (1, self.in_ch):
            raise ShapeError(f"groups must be 1 or in_ch, got {self.groups}")
        if self.groups != 1 and self.in_ch != self.out_ch:
            raise ShapeError("depthwise conv requires in_ch == out_ch")


@dataclass(frozen=True)
class WindowGrid:
    """Window geometry after grid alignment; rows*cols is the window count."""

    window: int
    rows: int
    cols: int
    pad_h: int
    pad_w: int


# ---------------------------------------------------------------------------
# Padding


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    return np.pad(np.arange(n), (before, after), mode="reflect")


def pad_reflect(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Reflect-pad the spatial axes of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"pad_reflect needs NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("cannot pad an empty image")
    if top == bottom == left == right == 0:
        return x
    ih = _reflect_index(h, top, bottom)
    iw = _reflect_index(w, left, right)
    out = x.data[:, :, ih[:, None], iw[None, :]]

    def bwd(g):
        gh = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), ih), g)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx.transpose(0, 1, 3, 2), (slice(None), slice(None), iw), gh.transpose(0, 1, 3, 2))
        return (gx,)

    return _make(out, (x,), bwd)


def crop(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Keep the top-left out_h x out_w region of an NCHW tensor."""
    n, c, h, w = x.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ShapeError(f"crop to {out_h}x{out_w} from {h}x{w}")
    if (out_h, out_w) == (h, w):
        return x

    def bwd(g):
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        full[:, :, :out_h, :out_w] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, :, :out_h, :out_w]), (x,), bwd)


def pad_to_grid(x: Tensor, window: int, levels: int) -> tuple[Tensor, WindowGrid]:
    """Reflect-pad right/bottom so both spatial dims divide window * 2**(levels-1)."""
    if window < 1 or levels < 1:
        raise ShapeError("window and levels must be >= 1")
    if x.data.ndim != 4:
        raise ShapeError(f"pad_to_grid needs NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("input smaller than 1 px")
    m = window << (levels - 1)
    pad_h = (-h) % m
    pad_w = (-w) % m
    out = pad_reflect(x, 0, pad_h, 0, pad_w)
    grid = WindowGrid(window, (h + pad_h) // window, (w + pad_w) // window, pad_h, pad_w)
    return out, grid


# ---------------------------------------------------------------------------
# Convolution


def _corr_valid(xp: Tensor, w: Tensor, groups: int) -> Tensor:
    """Valid cross-correlation of padded input `xp` with kernel `w`."""
    n, ci, hp, wp = xp.shape
    co, cig, k, _ = w.shape
    oh, ow = hp - k + 1, wp - k + 1
    out_dtype = np.result_type(xp.dtype, w.dtype)
    instrument.record_macs(n * co * cig * k * k * oh * ow)
    xd = xp.data.astype(np.float64, copy=False)
    wd = w.data.astype(np.float64, copy=False)

    if groups == 1:
        win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * k * k)
        wmat = wd.reshape(co, ci * k * k)
        y = (cols @ wmat.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

        def bwd(g):
            g2 = g.astype(np.float64, copy=False).transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
            gw = (g2.T @ cols).reshape(co, ci, k, k)
            gcols = (g2 @ wmat).reshape(n, oh, ow, ci, k, k).transpose(0, 3, 1, 2, 4, 5)
            gx = np.zeros((n, ci, hp, wp))
            for dy in range(k):
                for dx in range(k):
                    gx[:, :, dy : dy + oh, dx : dx + ow] += gcols[:, :, :, :, dy, dx]
            return gx, gw

    else:  # depthwise: groups == ci == co
        y = np.zeros((n, co, oh, ow))
        for dy in range(k):
            for dx in range(k):
                y += xd[:, :, dy : dy + oh, dx : dx + ow] * wd[:, 0, dy, dx][None, :, None, None]

        def bwd(g):
            g64 = g.astype(np.float64, copy=False)
            gx = np.zeros((n, ci, hp, wp))
            gw = np.zeros((co, 1, k, k))
            for dy in range(k):
                for dx in range(k):
                    seg = xd[:, :, dy : dy + oh, dx : dx + ow]
                    gw[:, 0, dy, dx] = (g64 * seg).sum(axis=(0, 2, 3))
                    gx[:, :, dy : dy + oh, dx : dx + ow] += g64 * wd[:, 0, dy, dx][None, :, None, None]
            return gx, gw

    return _make(np.ascontiguousarray(y).astype(out_dtype), (xp, w), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Same-size stride-1 convolution with reflect padding."""
    from .tensor import add_bias

    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    n, ci, h, w_ = x.shape
    if ci != spec.in_ch:
        raise ShapeError(f"conv2d input has {ci} channels, spec expects {spec.in_ch}")
    expect_w = (spec.out_ch, spec.in_ch // spec.groups, spec.kernel, spec.kernel)
    if w.shape != expect_w:
        raise ShapeError(f"conv2d kernel shape {w.shape}, spec expects {expect_w}")
    if spec.bias != (b is not None):
        raise ShapeError("conv2d bias presence disagrees with spec")
    p = spec.kernel // 2
    y = _corr_valid(pad_reflect(x, p, p, p, p), w, spec.groups)
    if b is not None:
        y = add_bias(y, b)
    return y


# ---------------------------------------------------------------------------
# Normalization and activation


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at each spatial position, then affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"layer_norm needs NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.astype(np.float64)[None, :, None, None]
    out = (gd * xhat + beta.data.astype(np.float64)[None, :, None, None]).astype(x.dtype)

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        gg = g64 * gd
        gx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        ggamma = (g64 * xhat).sum(axis=(0, 2, 3))
        gbeta = g64.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    xd = x.data.astype(np.float64, copy=False)
    phi_cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi_cdf + xd * pdf),)

    return _make((xd * phi_cdf).astype(x.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# Pooling / upsampling / shuffling


def pool_half(x: Tensor, mode: str = "avg") -> Tensor:
    """2x2 stride-2 pooling; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_half needs even dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    patches = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    if mode == "avg":
        out = patches.mean(axis=-1)

        def bwd(g):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            return (gx * 0.25,)

    elif mode == "max":
        arg = patches.argmax(axis=-1)
        out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]

        def bwd(g):
            gp = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(gp, arg[..., None], g[..., None], axis=-1)
            return (gp.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _make(np.ascontiguousarray(out), (x,), bwd)


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double both spatial dims by nearest or half-pixel bilinear interpolation."""
    n, c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bwd(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(out, (x,), bwd)

    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")

    def axis_coeffs(size):
        src = np.maximum((np.arange(2 * size) + 0.5) / 2.0 - 0.5, 0.0)
        i0 = np.minimum(src.astype(np.int64), size - 1)
        i1 = np.minimum(i0 + 1, size - 1)
        t = src - np.floor(src)
        return i0, i1, t

    r0, r1, ty = axis_coeffs(h)
    c0, c1, tx = axis_coeffs(w)
    xd = x.data.astype(np.float64, copy=False)
    rows = xd[:, :, r0, :] * (1 - ty)[None, None, :, None] + xd[:, :, r1, :] * ty[None, None, :, None]
    out = rows[:, :, :, c0] * (1 - tx) + rows[:, :, :, c1] * tx

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        grows = np.zeros((n, c, 2 * h, w))
        np.add.at(grows.transpose(0, 1, 3, 2), (slice(None), slice(None), c0), (g64 * (1 - tx)).transpose(0, 1, 3, 2))
        np.add.at(grows.transpose(0, 1, 3, 2), (slice(None), slice(None), c1), (g64 * tx).transpose(0, 1, 3, 2))
        gx = np.zeros((n, c, h, w))
        np.add.at(gx, (slice(None), slice(None), r0), grows * (1 - ty)[None, None, :, None])
        np.add.at(gx, (slice(None), slice(None), r1), grows * ty[None, None, :, None])
        return (gx,)

    return _make(out.astype(x.dtype), (x,), bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (n, c*r^2, h, w) into (n, c, r*h, r*w)."""
    n, cr2, h, w = x.shape
    if cr2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {cr2} channels not divisible by {r * r}")
    c = cr2 // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, r * h, r * w)

    def bwd(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr2, h, w),)

    return _make(np.ascontiguousarray(out), (x,), bwd)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle: (n, c, r*h, r*w) into (n, c*r^2, h, w)."""
    n, c, rh, rw = x.shape
    if rh % r or rw % r:
        raise ShapeError(f"pixel_unshuffle: {rh}x{rw} not divisible by {r}")
    h, w = rh // r, rw // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bwd(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, rh, rw),)

    return _make(np.ascontiguousarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# Windowing


def window_partition(x: Tensor, window: int) -> Tensor:
    """Split (n, c, h, w) into row-major windows of shape (n*N, window^2, c)."""
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by {window}")
    gh, gw = h // window, w // window
    t = reshape(x, (n, c, gh, window, gw, window))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (n * gh * gw, window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of window_partition back to (n, c, h, w)."""
    gh, gw = h // window, w // window
    bn, t, c = windows.shape
    if t != window * window or bn % (gh * gw):
        raise ShapeError(f"window_reverse: got {windows.shape} for {h}x{w}/{window}")
    n = bn // (gh * gw)
    x = reshape(windows, (n, gh, gw, window, window, c))
    x = transpose(x, (0, 5, 1, 3, 2, 4))
    return reshape(x, (n, c, h, w))
