"""Evaluation metrics: PSNR, multi-scale SSIM, and Bjontegaard delta rate.

MS-SSIM is built from tensor ops, so (1 - msssim) can serve directly as a
training distortion. Frames smaller than 176 px use fewer dyadic scales
with the exponents renormalized; the scale count is reported alongside
values where it matters (CSV emission) since it changes absolute numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T

PSNR_CAP_DB = 100.0

_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW = 11
_SIGMA = 1.5


@dataclass
class RdPoint:
    bpp: float
    quality: float

    def __post_init__(self):
        if self.bpp <= 0.0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a.data if isinstance(a, T.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, T.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(channels: int, dtype) -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    coords = np.arange(_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * _SIGMA**2))
    g /= g.sum()
    win = np.outer(g, g)
    kernel = np.zeros((channels, channels, _WINDOW, _WINDOW), dtype=dtype)
    for c in range(channels):
        kernel[c, c] = win
    return kernel


def msssim_scales(height: int, width: int) -> int:
    """Deepest usable scale count: the 11x11 window must fit after pooling."""
    scales = 0
    m = min(height, width)
    while scales < len(_MSSSIM_WEIGHTS) and m >= _WINDOW:
        scales += 1
        m //= 2
    if scales == 0:
        raise T.ShapeError(f"frame {height}x{width} too small for an 11x11 ssim window")
    return scales


def _even_crop(x: T.Tensor) -> T.Tensor:
    n, c, h, w = x.shape
    if h % 2:
        x = T.narrow(x, 2, 0, h - 1)
    if w % 2:
        x = T.narrow(x, 3, 0, x.shape[3] - 1)
    return x


def msssim(a, b, peak: float = 1.0) -> T.Tensor:
    """Multi-scale SSIM in (0, 1]; exactly 1.0 for identical inputs."""
    if not isinstance(a, T.Tensor):
        a = T.constant(np.asarray(a))
    if not isinstance(b, T.Tensor):
        b = T.constant(np.asarray(b))
    if a.shape != b.shape:
        raise T.ShapeError(f"msssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise T.ShapeError("msssim expects NCHW frames")
    n, c, h, w = a.shape
    scales = msssim_scales(h, w)
    weights = np.asarray(_MSSSIM_WEIGHTS[:scales], dtype=np.float64)
    weights /= weights.sum()
    kernel = T.constant(_gaussian_kernel(c, a.dtype))
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def blur(x):
        return T.conv2d(x, kernel, None, stride=1, pad=0)

    total = None
    for scale in range(scales):
        mu_a = blur(a)
        mu_b = blur(b)
        var_a = T.sub(blur(T.mul(a, a)), T.mul(mu_a, mu_a))
        var_b = T.sub(blur(T.mul(b, b)), T.mul(mu_b, mu_b))
        cov = T.sub(blur(T.mul(a, b)), T.mul(mu_a, mu_b))
        cs = T.div(T.add(T.mul(cov, 2.0), c2), T.add(T.add(var_a, var_b), c2))
        if scale == scales - 1:
            lum = T.div(T.add(T.mul(T.mul(mu_a, mu_b), 2.0), c1),
                        T.add(T.add(T.mul(mu_a, mu_a), T.mul(mu_b, mu_b)), c1))
            term = T.tmean(T.mul(lum, cs))
        else:
            term = T.tmean(cs)
            a = T.avg_pool2(_even_crop(a))
            b = T.avg_pool2(_even_crop(b))
        factor = T.power(T.clamp(term, lo=1e-6), float(weights[scale]))
        total = factor if total is None else T.mul(total, factor)
    return total


def msssim_value(a, b, peak: float = 1.0) -> float:
    return msssim(a, b, peak).item()


def _fit_log_rate(points: list[RdPoint]):
    pts = sorted(points, key=lambda p: p.bpp)
    qual = np.array([p.quality for p in pts])
    rate = np.array([p.bpp for p in pts])
    if len(pts) < 4:
        raise ValueError("bd_rate needs at least 4 points per curve")
    if np.any(np.diff(qual) <= 0.0):
        raise ValueError("quality must increase strictly with bpp")
    coeff = np.polyfit(qual, np.log10(rate), 3)
    return coeff, float(qual.min()), float(qual.max())


def bd_rate(anchor: list[RdPoint], test: list[RdPoint]) -> float:
    """Average percent bitrate difference of ``test`` vs ``anchor``.

    Cubic fit of log10(rate) against quality, integrated over the shared
    quality interval. Negative values mean the test curve saves bitrate.
    """
    ca, lo_a, hi_a = _fit_log_rate(anchor)
    cb, lo_b, hi_b = _fit_log_rate(test)
    lo, hi = max(lo_a, lo_b), min(hi_a, hi_b)
    if hi <= lo:
        raise ValueError("curves have no overlapping quality range")
    ia = np.polyint(ca)
    ib = np.polyint(cb)
    avg_diff = (np.polyval(ib, hi) - np.polyval(ib, lo)
                - np.polyval(ia, hi) + np.polyval(ia, lo)) / (hi - lo)
    return float((10.0**avg_diff - 1.0) * 100.0)


def write_rd_csv(path, rows: list[dict]) -> None:
    """Emit RD table rows (lambda_id, bpp, psnr, msssim, ...) as CSV."""
    if not rows:
        raise ValueError("no RD rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
