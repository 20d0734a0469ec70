"""Optical density conversion and colour deconvolution.

Stains are described by a 3x3 matrix whose rows are the RGB absorbance
signatures of hematoxylin, eosin and DAB.  Absorbances add linearly in
optical density, so a pixel's OD is ``M.T @ c`` for its concentration
vector ``c``.  With OD images stored as ``(H, W, 3)`` arrays this becomes
``od = c @ M`` and ``c = od @ inv(M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_I0 = 1.0
DEFAULT_EPS = 1e-6
DET_THRESHOLD = 1e-6

HEMATOXYLIN = 0
EOSIN = 1
DAB = 2
STAIN_NAMES = ("hematoxylin", "eosin", "dab")

DEFAULT_STAIN_ROWS = (
    (0.650, 0.704, 0.286),  # hematoxylin
    (0.072, 0.990, 0.105),  # eosin
    (0.268, 0.570, 0.776),  # DAB
)


class SingularStainMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class StainMatrix:
    """Row-normalised stain absorbance matrix (H, E, DAB rows).

    Rows are rescaled to unit Euclidean length on construction; a matrix
    whose normalised determinant is below ``1e-6`` in magnitude is rejected.
    """

    rows: np.ndarray
    unmix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got shape {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(rows)):
            raise SingularStainMatrixError("stain matrix has a zero or non-finite row")
        rows = rows / norms[:, None]
        det = np.linalg.det(rows)
        if abs(det) <= DET_THRESHOLD:
            raise SingularStainMatrixError(f"stain matrix is singular (det={det:.3g})")
        rows.setflags(write=False)
        unmix = np.linalg.inv(rows)
        unmix.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "unmix", unmix)

    @classmethod
    def default(cls) -> "StainMatrix":
        return cls(np.array(DEFAULT_STAIN_ROWS))

    @classmethod
    def from_flat(cls, values) -> "StainMatrix":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != 9:
            raise ValueError(f"stain matrix needs 9 numbers, got {values.size}")
        return cls(values.reshape(3, 3))

    def flat(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.rows.ravel())

    @property
    def dab_unmix(self) -> np.ndarray:
        """Coefficients mapping an OD 3-vector to DAB concentration."""
        return self.unmix[:, DAB]


def _require_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img


def rgb_to_od(img, i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-channel optical density ``-log10((I + eps) / i0)``."""
    img = _require_rgb(img)
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    return -np.log10((img + eps) / i0)


def od_to_rgb(od, i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, clamped to the unit interval."""
    od = np.asarray(od, dtype=np.float64)
    return np.clip(i0 * np.power(10.0, -od) - eps, 0.0, 1.0)


def separate_stains(od, m: StainMatrix | None = None):
    """Solve ``OD = M.T @ c`` at every pixel.

    Returns
    -------
    (c_h, c_e, c_dab) : tuple of (H, W) arrays
        Raw concentrations; negative values from noise are kept.
    """
    m = m or StainMatrix.default()
    od = np.asarray(od, dtype=np.float64)
    if od.shape[-1] != 3:
        raise ValueError(f"OD image must have 3 channels, got shape {od.shape}")
    c = od @ m.unmix
    return c[..., HEMATOXYLIN], c[..., EOSIN], c[..., DAB]


def recompose_stains(c_h, c_e, c_dab, m: StainMatrix | None = None) -> np.ndarray:
    """Optical density from per-stain concentration maps."""
    m = m or StainMatrix.default()
    c = np.stack(np.broadcast_arrays(
        np.asarray(c_h, dtype=np.float64),
        np.asarray(c_e, dtype=np.float64),
        np.asarray(c_dab, dtype=np.float64),
    ), axis=-1)
    return c @ m.rows


def compose_rgb(c_h, c_e, c_dab, m: StainMatrix | None = None,
                i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Render concentration maps to an RGB image in [0, 1]."""
    return od_to_rgb(recompose_stains(c_h, c_e, c_dab, m), i0, eps)


def dab_concentration(img, m: StainMatrix | None = None,
                      i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> np.ndarray:
    return separate_stains(rgb_to_od(img, i0, eps), m)[DAB]


def normalize_weight(cmap, floor: float = 1e-12) -> np.ndarray:
    """Min-max normalise a concentration map into [0, 1].

    A map whose range is below ``floor`` carries no localisation and maps
    to all zeros.
    """
    cmap = np.asarray(cmap, dtype=np.float64)
    lo, hi = cmap.min(), cmap.max()
    span = hi - lo
    if span < floor:
        return np.zeros_like(cmap)
    return np.clip((cmap - lo) / span, 0.0, 1.0)
