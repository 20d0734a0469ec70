"""Paired image-quality metrics: SSIM, PSNR, gradient MSE and a multi-scale
DCT perceptual hash distance."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft, signal

from .gradients import image_gradient_magnitude, to_gray

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP = 100.0
PHASH_SCALES = (32, 16, 8, 4)
PHASH_BLOCK = 8


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[2] == 3:
        return to_gray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ValueError(f"unsupported image shape {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows.

    RGB inputs are compared on their luma channel.
    """
    a, b = _pair(a, b)
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(z):
        return signal.correlate2d(z, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse))


def gradient_mse(a, b) -> float:
    """Unweighted mean squared difference of Sobel gradient magnitudes."""
    a, b = _pair(a, b)
    da = image_gradient_magnitude(_gray(a))
    db = image_gradient_magnitude(_gray(b))
    return float(np.mean((da - db) ** 2))


def _box_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-averaging resampling matrix of shape (n_out, n_in)."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def box_resize(gray: np.ndarray, size: int) -> np.ndarray:
    h, w = gray.shape
    return _box_matrix(h, size) @ gray @ _box_matrix(w, size).T


def phash_bits(gray: np.ndarray, scale: int) -> np.ndarray:
    """Median-thresholded low-frequency DCT bits of ``gray`` resized to ``scale``."""
    small = box_resize(gray, scale)
    coeffs = fft.dctn(small, type=2, norm="ortho")
    k = min(PHASH_BLOCK, scale)
    block = coeffs[:k, :k].ravel()[1:]  # drop DC
    return block > np.median(block)


def phash_distance(a, b) -> tuple[float, ...]:
    """Normalised Hamming distance of perceptual hashes at scales 32, 16, 8, 4."""
    a, b = _pair(a, b)
    x, y = _gray(a), _gray(b)
    if min(x.shape) < PHASH_SCALES[0]:
        raise ValueError(f"image {x.shape} too small for perceptual hash (need >= 32x32)")
    out = []
    for scale in PHASH_SCALES:
        ha, hb = phash_bits(x, scale), phash_bits(y, scale)
        out.append(float(np.count_nonzero(ha != hb)) / ha.size)
    return tuple(out)


@dataclass(frozen=True)
class MetricReport:
    ssim: float
    psnr: float
    gradient_mse: float
    phash: tuple

    def as_dict(self) -> dict:
        d = asdict(self)
        d["phash"] = {f"layer{i + 1}": v for i, v in enumerate(self.phash)}
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def evaluate_pair(real, gen) -> MetricReport:
    real, gen = _pair(real, gen)
    return MetricReport(
        ssim=ssim(real, gen),
        psnr=psnr(real, gen),
        gradient_mse=gradient_mse(real, gen),
        phash=phash_distance(real, gen),
    )
