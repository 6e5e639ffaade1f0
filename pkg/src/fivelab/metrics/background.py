"""Background-preservation kernels evaluated outside the edit mask."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0


class NoBackgroundError(ValueError):
    """The mask leaves no pixel (or no SSIM window) to evaluate."""


def _check(src, edit, mask):
    src = np.asarray(src, dtype=np.float64)
    edit = np.asarray(edit, dtype=np.float64)
    if src.shape != edit.shape:
        raise ValueError(f"frame shapes differ: {src.shape} vs {edit.shape}")
    if src.ndim == 2:
        src, edit = src[None], edit[None]
    m = np.zeros(src.shape[-2:], dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if m.shape != src.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match frame {src.shape[-2:]}")
    return src, edit, m


def masked_mse(src, edit, mask=None) -> float:
    src, edit, m = _check(src, edit, mask)
    bg = ~m
    if not bg.any():
        raise NoBackgroundError("mask covers the whole frame")
    d = src[:, bg] - edit[:, bg]
    return float(np.mean(d * d))


def psnr_from_mse(mse: float, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    if mse == 0.0:
        return cap
    return 10.0 * math.log10(max_val * max_val / mse)


def masked_psnr(src, edit, mask=None, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    return psnr_from_mse(masked_mse(src, edit, mask), max_val, cap)


def masked_ssim(src, edit, mask=None, window: int = 7, C1: float | None = None, C2: float | None = None,
                data_range: float = 1.0) -> float:
    """Mean local SSIM (uniform window) over windows that contain no masked pixel.

    Averaged over channels; a window touching the mask is dropped entirely.
    """
    src, edit, m = _check(src, edit, mask)
    if C1 is None:
        C1 = (0.01 * data_range) ** 2
    if C2 is None:
        C2 = (0.03 * data_range) ** 2
    if C1 <= 0 or C2 <= 0:
        raise ValueError("SSIM constants must be positive")
    h, w = m.shape
    if window > h or window > w:
        raise ValueError(f"window {window} does not fit a {h}x{w} frame")
    valid = ~sliding_window_view(m, (window, window)).any(axis=(-2, -1))
    if not valid.any():
        raise NoBackgroundError("no SSIM window lies fully outside the mask")
    scores = []
    for x, y in zip(src, edit):
        wx = sliding_window_view(x, (window, window))[valid]
        wy = sliding_window_view(y, (window, window))[valid]
        mx = wx.mean(axis=(-2, -1))
        my = wy.mean(axis=(-2, -1))
        dx = wx - mx[:, None, None]
        dy = wy - my[:, None, None]
        vx = (dx * dx).mean(axis=(-2, -1))
        vy = (dy * dy).mean(axis=(-2, -1))
        cxy = (dx * dy).mean(axis=(-2, -1))
        s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        scores.append(s.mean())
    return float(np.mean(scores))
