"""Plain-numpy image utilities: gaussian blur, bilinear resize, square crops.

These operate on [C,H,W] or [H,W] float arrays and are used on the data path
(mask post-processing, background construction), never inside the autodiff
graph.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


def gaussian_kernel_1d(size, sigma):
    if size % 2 != 1 or size < 1:
        raise ConfigError(f"gaussian kernel size must be odd, got {size}")
    if size == 1 or sigma <= 0:
        return np.ones(1)
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img, kernel, axis):
    r = len(kernel) // 2
    if r == 0:
        return img
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(i, i + img.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def gaussian_blur(img, size=5, sigma=1.5):
    """Separable gaussian blur with reflect padding over the spatial axes."""
    k = gaussian_kernel_1d(size, sigma)
    out = _blur_axis(img, k, axis=img.ndim - 2)
    return _blur_axis(out, k, axis=img.ndim - 1)


def bilinear_resize(img, out_h, out_w):
    """Bilinear resize over the last two axes; identity when sizes match."""
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x1[None, :]]
    c = img[..., y1[:, None], x0[None, :]]
    d = img[..., y1[:, None], x1[None, :]]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def crop_square(img, top, left, side):
    h, w = img.shape[-2], img.shape[-1]
    if side > h or side > w:
        raise ConfigError(f"crop side {side} exceeds image size {h}x{w}")
    if top < 0 or left < 0 or top + side > h or left + side > w:
        raise ShapeError(f"crop window ({top},{left},{side}) outside {h}x{w} image")
    return img[..., top:top + side, left:left + side]
