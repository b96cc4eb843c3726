"""Color conversion, bicubic resampling and Y-channel PSNR / SSIM.

RGB images are ``uint8`` arrays of shape ``(H, W, 3)``. Luminance images
are float64 ``(H, W)`` arrays on the [0, 255] scale.
"""

import math
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import ContractViolation

PSNR_INF = math.inf  # sentinel for identical images
CUBIC_A = -0.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0


def check_rgb(img, what="image"):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"{what}: expected (H, W, 3) RGB array, got shape {img.shape}")
    return img


def rgb_to_y(img):
    """BT.601 studio-range luminance: ``16 + 65.481 R + 128.553 G + 24.966 B`` with RGB in [0, 1]."""
    rgb = check_rgb(img).astype(np.float64) / 255.0
    y = 16.0 + rgb[..., 0] * 65.481 + rgb[..., 1] * 128.553 + rgb[..., 2] * 24.966
    return np.clip(y, 0.0, 255.0)


def cubic(x, a=CUBIC_A):
    """Cubic convolution kernel (Keys), support [-2, 2]."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_weights(in_size, out_size, antialias=True):
    """Dense ``(out_size, in_size)`` interpolation matrix for one axis.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / scale - 0.5``.
    When shrinking, the kernel is stretched by ``1 / scale``. Taps falling
    outside the input are clamped to the nearest edge sample.
    """
    scale = out_size / in_size
    shrink = antialias and scale < 1.0
    width = 4.0 / scale if shrink else 4.0
    taps = int(math.ceil(width)) + 2
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2.0).astype(np.int64)
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centers[:, None] - idx
    w = scale * cubic(scale * dist) if shrink else cubic(dist)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def resize_float(arr, out_h, out_w, antialias=True):
    """Separable bicubic resize of a float ``(H, W)`` or ``(H, W, C)`` array."""
    arr = np.asarray(arr, dtype=np.float64)
    wy = resize_weights(arr.shape[0], out_h, antialias)
    wx = resize_weights(arr.shape[1], out_w, antialias)
    if arr.ndim == 2:
        return wy @ arr @ wx.T
    return np.einsum("ij,jkc,lk->ilc", wy, arr, wx, optimize=True)


def quantize(arr):
    """Clamp to [0, 255] and round half away from zero to uint8."""
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 255.0)
    return np.floor(arr + 0.5).astype(np.uint8)


def resize(img, out_h, out_w):
    return quantize(resize_float(check_rgb(img), out_h, out_w))


def bicubic_resize(img, scale):
    """Resize an RGB image by a rational factor (``4`` up, ``Fraction(1, 4)`` down)."""
    img = check_rgb(img)
    scale = Fraction(scale).limit_denominator(1000)
    h, w = img.shape[:2]
    out_h, out_w = h * scale, w * scale
    if out_h.denominator != 1 or out_w.denominator != 1:
        raise ContractViolation(f"bicubic_resize: {w}x{h} is not divisible for scale {scale}")
    if out_h == 0 or out_w == 0:
        raise ContractViolation(f"bicubic_resize: empty output for {w}x{h} at scale {scale}")
    return resize(img, int(out_h), int(out_w))


def downscale4(img):
    return bicubic_resize(img, Fraction(1, 4))


def _check_pair(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: dimension mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range=DATA_RANGE):
    a, b = _check_pair(a, b, "psnr")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / mse)


def psnr_y(a, b):
    """PSNR in dB between two luminance images; :data:`PSNR_INF` when identical."""
    return psnr(a, b)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim_y(a, b):
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _check_pair(a, b, "ssim")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ContractViolation(f"ssim: need 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    g = gaussian_window()
    mu1, mu2 = _filter_valid(a, g), _filter_valid(b, g)
    s11 = _filter_valid(a * a, g) - mu1 * mu1
    s22 = _filter_valid(b * b, g) - mu2 * mu2
    s12 = _filter_valid(a * b, g) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def y_metrics(pred, target):
    """``(psnr_db, ssim)`` on the Y channel of two RGB images."""
    ya, yb = rgb_to_y(pred), rgb_to_y(target)
    return psnr_y(ya, yb), ssim_y(ya, yb)


def mean_finite(values):
    """Mean over finite entries and the number of infinite ones skipped."""
    vals = [v for v in values if math.isfinite(v)]
    n_inf = len(values) - len(vals)
    return (float(np.mean(vals)) if vals else PSNR_INF if n_inf else math.nan), n_inf


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(path, img):
    Image.fromarray(check_rgb(img).astype(np.uint8)).save(path, format="PNG")
