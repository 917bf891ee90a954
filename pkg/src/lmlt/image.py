"""Image I/O, color conversion, bicubic resampling, and Y-channel metrics.

Luma follows ITU-R BT.601 studio swing (Y in [16, 235] for inputs in
[0, 1]); PSNR/SSIM shave a border before evaluation, defaulting to the
upscaling factor, and PSNR uses the 255 peak regardless of swing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageFormatError, UnsupportedDepthError
from .tensor import Tensor

_Y_COEFF = np.array([65.481, 128.553, 24.966])
_Y_OFFSET = 16.0
BICUBIC_A = -0.5


@dataclass
class PlanarImage:
    """8-bit raster; data is (height, width, channels) uint8, row-major."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        expect = (self.height, self.width, self.channels)
        if self.data.shape != expect or self.data.dtype != np.uint8:
            raise ImageFormatError(f"image data must be uint8 {expect}, got {self.data.shape} {self.data.dtype}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PlanarImage":
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, np.ascontiguousarray(arr))

    def to_float_planar(self) -> np.ndarray:
        """(channels, height, width) float64 in [0, 1]."""
        return self.data.astype(np.float64).transpose(2, 0, 1) / 255.0

    @classmethod
    def from_float_planar(cls, planar: np.ndarray) -> "PlanarImage":
        """Clamp to [0, 1], quantize half-up to uint8."""
        arr = np.clip(planar, 0.0, 1.0) * 255.0
        arr = np.floor(arr + 0.5).astype(np.uint8).transpose(1, 2, 0)
        return cls.from_array(arr)

    def to_tensor(self) -> Tensor:
        return Tensor(self.to_float_planar()[None].astype(np.float32))

    @classmethod
    def from_tensor(cls, t: Tensor) -> "PlanarImage":
        if len(t.shape) != 4 or t.shape[0] != 1:
            raise ImageFormatError(f"expected a single-image tensor, got {t.shape}")
        return cls.from_float_planar(t.data[0])


def rgb_to_y(img: PlanarImage) -> np.ndarray:
    """BT.601 studio-swing luma plane as float64 on the [0, 255] scale."""
    if img.channels != 3:
        raise ImageFormatError(f"rgb_to_y needs 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64) / 255.0
    return _Y_OFFSET + rgb @ _Y_COEFF


def _luma(img: PlanarImage) -> np.ndarray:
    if img.channels == 3:
        return rgb_to_y(img)
    if img.channels == 1:
        return img.data[:, :, 0].astype(np.float64)
    raise ImageFormatError(f"unsupported channel count {img.channels}")


def _shaved_pair(a: PlanarImage, b: PlanarImage, shave: int):
    if (a.width, a.height) != (b.width, b.height):
        raise ImageFormatError(f"image dims differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    if shave < 0 or 2 * shave >= min(a.width, a.height):
        raise ImageFormatError(f"shave {shave} too large for {a.width}x{a.height}")
    ya, yb = _luma(a), _luma(b)
    if shave:
        ya = ya[shave:-shave, shave:-shave]
        yb = yb[shave:-shave, shave:-shave]
    return ya, yb


def psnr_y(a: PlanarImage, b: PlanarImage, shave: int = 0) -> float:
    """Y-channel PSNR in dB; identical inputs return +inf."""
    ya, yb = _shaved_pair(a, b, shave)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 * 255.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _sep_filter_valid(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    t = np.lib.stride_tricks.sliding_window_view(a, k.size, axis=1) @ k
    t = np.lib.stride_tricks.sliding_window_view(t, k.size, axis=0) @ k
    return t


def ssim_y(a: PlanarImage, b: PlanarImage, shave: int = 0) -> float:
    """Single-scale SSIM on Y: 11x11 Gaussian sigma 1.5, K1=.01, K2=.03, L=255."""
    ya, yb = _shaved_pair(a, b, shave)
    if min(ya.shape) < 11:
        raise ImageFormatError(f"SSIM needs at least 11x11 after shaving, got {ya.shape}")
    k = _gaussian_kernel()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_a = _sep_filter_valid(ya, k)
    mu_b = _sep_filter_valid(yb, k)
    var_a = _sep_filter_valid(ya * ya, k) - mu_a * mu_a
    var_b = _sep_filter_valid(yb * yb, k) - mu_b * mu_b
    cov = _sep_filter_valid(ya * yb, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Bicubic resampling


def bicubic_weights(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    """Cubic kernel value at |t|; zero beyond 2."""
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    w[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    w[far] = a * (t[far] ** 3 - 5.0 * t[far] ** 2 + 8.0 * t[far] - 4.0)
    return w


def _axis_taps(n_in: int, n_out: int, factor: Fraction):
    """Per-output-sample source indices (clamped) and kernel weights."""
    j = np.arange(n_out, dtype=np.float64)
    src = (j + 0.5) / float(factor) - 0.5
    base = np.floor(src).astype(np.int64)
    idx = base[:, None] + np.arange(-1, 3)[None, :]
    w = bicubic_weights(src[:, None] - idx)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, w


def bicubic_resize(img: PlanarImage, factor) -> PlanarImage:
    """Separable bicubic (a = -0.5) with half-pixel centers and edge clamp."""
    f = Fraction(factor).limit_denominator(10**6) if not isinstance(factor, Fraction) else factor
    if f <= 0:
        raise ImageFormatError(f"factor must be positive, got {factor}")
    out_w = int(img.width * f)
    out_h = int(img.height * f)
    if out_w < 1 or out_h < 1:
        raise ImageFormatError(f"output dims {out_w}x{out_h} too small")
    data = img.data.astype(np.float64)
    iw, ww = _axis_taps(img.width, out_w, f)
    ih, wh = _axis_taps(img.height, out_h, f)
    # rows: (h, out_w, c)
    t = np.einsum("hjtc,jt->hjc", data[:, iw, :], ww)
    t = np.einsum("itwc,it->iwc", t[ih, :, :], wh)
    out = np.floor(np.clip(t, 0.0, 255.0) + 0.5).astype(np.uint8)
    return PlanarImage.from_array(out)


# ---------------------------------------------------------------------------
# PNG I/O


def png_load(path) -> PlanarImage:
    """Load an 8-bit RGB or grayscale PNG."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
                raise UnsupportedDepthError(f"unsupported bit depth (mode {mode})")
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
                return PlanarImage.from_array(arr)
            if mode in ("RGB", "RGBA", "P", "LA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
                return PlanarImage.from_array(arr)
            raise ImageFormatError(f"unsupported PNG mode {mode}")
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"malformed image file: {path}") from exc
    except OSError as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"cannot read image file: {path}") from exc


def png_save(img: PlanarImage, path) -> None:
    """Save as PNG; roundtrips losslessly through png_load."""
    if img.channels == 1:
        pil = Image.fromarray(img.data[:, :, 0], mode="L")
    elif img.channels == 3:
        pil = Image.fromarray(img.data, mode="RGB")
    else:
        raise ImageFormatError(f"cannot save {img.channels}-channel image")
    pil.save(path, format="PNG")
