"""Grayscale conversion and Sobel gradient maps.

Sobel responses are cross-correlations with edge-replicated borders, so a
positive ``gx`` means intensity increases with the column index and a
positive ``gy`` means it increases with the row index.
"""

from __future__ import annotations

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def to_gray(img, weights=LUMA_WEIGHTS) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"to_gray expects an (H, W, 3) image, got shape {img.shape}")
    return img @ np.asarray(weights, dtype=np.float64)


def _as_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return to_gray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    return img


def _check_size(gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {gray.shape}")
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"image {gray.shape} is smaller than the 3x3 Sobel kernel")


def correlate3(gray: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with edge-replicated padding.

    Positive and negative taps are accumulated separately so that a
    zero-sum kernel gives exactly zero on constant regions.
    """
    h, w = gray.shape
    padded = np.pad(gray, 1, mode="edge")
    pos = np.zeros((h, w))
    neg = np.zeros((h, w))
    for a in range(3):
        for b in range(3):
            k = kernel[a, b]
            if k > 0:
                pos += k * padded[a:a + h, b:b + w]
            elif k < 0:
                neg -= k * padded[a:a + h, b:b + w]
    return pos - neg


def correlate3_adjoint(grad_out: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`correlate3`: maps d(loss)/d(out) to d(loss)/d(input)."""
    h, w = grad_out.shape
    padded = np.zeros((h + 2, w + 2))
    for a in range(3):
        for b in range(3):
            k = kernel[a, b]
            if k:
                padded[a:a + h, b:b + w] += k * grad_out
    # fold the replicated border back onto the pixels it was copied from
    padded[1, :] += padded[0, :]
    padded[-2, :] += padded[-1, :]
    padded[:, 1] += padded[:, 0]
    padded[:, -2] += padded[:, -1]
    return padded[1:-1, 1:-1]


def sobel(gray):
    """Signed horizontal and vertical Sobel derivatives of a grayscale image."""
    gray = np.asarray(gray, dtype=np.float64)
    _check_size(gray)
    return correlate3(gray, SOBEL_X), correlate3(gray, SOBEL_Y)


def gradient_magnitude(gray) -> np.ndarray:
    gx, gy = sobel(gray)
    return np.hypot(gx, gy)


def image_gradient_magnitude(img) -> np.ndarray:
    """Gradient magnitude of an RGB or grayscale image (RGB goes through luma)."""
    return gradient_magnitude(_as_gray(img))
