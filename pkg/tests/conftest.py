import math

import numpy as np
import pytest

# Independent forward model: unit-normalised H, E, DAB absorbance rows.
RAW_ROWS = np.array([
    [0.650, 0.704, 0.286],
    [0.072, 0.990, 0.105],
    [0.268, 0.570, 0.776],
])
ROWS = RAW_ROWS / np.sqrt((RAW_ROWS ** 2).sum(axis=1, keepdims=True))
EPS = 1e-6


def forward_compose(c_h, c_e, c_dab, eps=EPS):
    """Render concentrations to RGB without going through the package."""
    c_h, c_e, c_dab = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (c_h, c_e, c_dab)))
    od = (c_h[..., None] * ROWS[0] + c_e[..., None] * ROWS[1] + c_dab[..., None] * ROWS[2])
    return 10.0 ** (-od) - eps


def random_concentrations(rng, shape, hi=(0.8, 0.5, 0.8)):
    return tuple(rng.uniform(0.0, h, shape) for h in hi)


def brute_force_ssim(x, y, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Window-by-window SSIM with explicit weighted moments."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.array([math.exp(-v * v / (2 * sigma * sigma)) for v in ax])
    w = np.outer(g, g)
    w /= w.sum()
    h, wd = x.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = np.sum(w * px), np.sum(w * py)
            vx = np.sum(w * (px - mx) ** 2)
            vy = np.sum(w * (py - my) ** 2)
            cxy = np.sum(w * (px - mx) * (py - my))
            vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                        / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
