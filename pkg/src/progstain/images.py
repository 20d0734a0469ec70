"""Image containers, raster I/O and synthetic stained-tissue fixtures.

Images are plain float64 numpy arrays with intensities in [0, 1]: shape
``(H, W)`` for grayscale and ``(H, W, 3)`` for RGB.  Quantisation happens
only when writing files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .deconv import DEFAULT_EPS, DEFAULT_I0, StainMatrix, compose_rgb

NUCLEUS_HEMA = 0.8
MEMBRANE_WIDTH = 2
MIN_FIXTURE_SIZE = 32


class UnsupportedImageError(ValueError):
    pass


def as_image(arr, copy: bool = False) -> np.ndarray:
    """Validate ``arr`` as an image and return it as float64."""
    img = np.asarray(arr, dtype=np.float64)
    if copy:
        img = img.copy()
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise UnsupportedImageError(f"unsupported channel count for shape {img.shape}")
    if img.size == 0:
        raise UnsupportedImageError("empty image")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


def channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


# --- plain-text PNM ---------------------------------------------------------

def _pnm_tokens(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        yield from line.split()


def _read_plain_pnm(path: Path) -> np.ndarray:
    tokens = _pnm_tokens(path.read_text(encoding="ascii"))
    magic = next(tokens)
    nch = {"P2": 1, "P3": 3}[magic]
    width, height, maxval = int(next(tokens)), int(next(tokens)), int(next(tokens))
    if not 0 < maxval < 65536:
        raise UnsupportedImageError(f"bad PNM maxval {maxval}")
    values = np.fromiter((int(t) for t in tokens), dtype=np.int64)
    expected = width * height * nch
    if values.size != expected:
        raise UnsupportedImageError(f"PNM has {values.size} samples, expected {expected}")
    data = values.reshape((height, width, nch) if nch == 3 else (height, width))
    return data.astype(np.float64) / maxval


def _write_plain_pnm(img: np.ndarray, path: Path, bits: int) -> None:
    maxval = (1 << bits) - 1
    q = np.rint(img * maxval).astype(np.int64)
    magic = "P2" if img.ndim == 2 else "P3"
    height, width = img.shape[:2]
    rows = q.reshape(height, -1)
    body = "\n".join(" ".join(map(str, row)) for row in rows)
    path.write_text(f"{magic}\n{width} {height}\n{maxval}\n{body}\n", encoding="ascii")


def _is_plain_pnm(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) in (b"P2", b"P3")


# --- public I/O -------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read a PNG or PPM/PGM file into a float image in [0, 1].

    Integer samples are divided by the format's maximum value.  Only
    grayscale and RGB rasters are accepted.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    if _is_plain_pnm(path):
        return as_image(_read_plain_pnm(path))
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "1":
                im = im.convert("L")
            elif mode == "P":
                if "transparency" in im.info:
                    raise UnsupportedImageError("unsupported channel count: palette with alpha")
                im = im.convert("RGB")
            mode = im.mode
            arr = np.asarray(im)
    except UnsupportedImageError:
        raise
    except (OSError, SyntaxError) as exc:
        raise UnsupportedImageError(f"cannot read {path}: {exc}") from exc

    if mode in ("L", "RGB"):
        scale = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    else:
        raise UnsupportedImageError(f"unsupported channel count (mode {mode})")
    return as_image(arr.astype(np.float64) / scale)


def save_image(img, path, bits: int = 8) -> None:
    """Write ``img`` to ``path``; format follows the extension.

    ``.png`` is always 8-bit.  ``.ppm``/``.pgm``/``.pnm`` are written as
    plain text with 8 or 16 bits per sample.
    """
    img = as_image(img)
    path = Path(path)
    suffix = path.suffix.lower()
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    if suffix in (".ppm", ".pgm", ".pnm"):
        if suffix == ".ppm" and img.ndim != 3 or suffix == ".pgm" and img.ndim != 2:
            raise UnsupportedImageError(f"{suffix} does not match image channels")
        _write_plain_pnm(img, path, bits)
    elif suffix == ".png":
        if bits != 8:
            raise ValueError("PNG output is 8-bit only")
        q = np.rint(img * 255.0).astype(np.uint8)
        PILImage.fromarray(q, mode="L" if img.ndim == 2 else "RGB").save(path)
    else:
        raise UnsupportedImageError(f"unsupported output format {suffix!r}")


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Spatial Gaussian blur; channels are blurred independently."""
    img = as_image(img)
    if sigma <= 0:
        return img.copy()
    sig = (sigma, sigma) if img.ndim == 2 else (sigma, sigma, 0)
    return np.clip(ndimage.gaussian_filter(img, sig, mode="nearest"), 0.0, 1.0)


# --- fixtures ---------------------------------------------------------------

@dataclass(frozen=True)
class FixtureTruth:
    dab_truth: np.ndarray
    hema_truth: np.ndarray
    membrane_mask: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "height": int(self.dab_truth.shape[0]),
            "width": int(self.dab_truth.shape[1]),
            "dab_truth": self.dab_truth.ravel().tolist(),
            "hema_truth": self.hema_truth.ravel().tolist(),
        })


def _place_cells(rng, height, width, n_cells):
    """Pick non-overlapping (where possible) cell centres and radii."""
    cells = []
    for _ in range(n_cells):
        for attempt in range(200):
            outer = int(rng.integers(6, 11))
            nucleus = int(rng.integers(2, outer - MEMBRANE_WIDTH - 1))
            cy = int(rng.integers(outer, height - outer))
            cx = int(rng.integers(outer, width - outer))
            clear = all((cy - y) ** 2 + (cx - x) ** 2 > (outer + r + 1) ** 2
                        for y, x, r, _ in cells)
            if clear or attempt == 199:
                break
        cells.append((cy, cx, outer, nucleus))
    return cells


def synth_fixture(seed: int, height: int = 64, width: int = 64, n_cells: int = 3,
                  m: StainMatrix | None = None, i0: float = DEFAULT_I0,
                  eps: float = DEFAULT_EPS):
    """Synthetic H&E / IHC pair with known stain concentrations.

    Each cell is a hematoxylin nucleus (concentration 0.8) inside a 2 px
    DAB membrane ring whose concentration is drawn per cell from
    [0.3, 1.0].  The IHC image is rendered from hematoxylin + DAB, the H&E
    image from hematoxylin + eosin (cytoplasm and a faint stroma).

    Returns
    -------
    he_like, ihc_like : (H, W, 3) arrays
    truth : FixtureTruth
    """
    if n_cells < 0:
        raise ValueError("n_cells must be non-negative")
    if height < MIN_FIXTURE_SIZE or width < MIN_FIXTURE_SIZE:
        raise ValueError(
            f"dimensions too small to place a cell (need >= {MIN_FIXTURE_SIZE} px)")
    m = m or StainMatrix.default()
    rng = np.random.default_rng(seed)

    yy, xx = np.mgrid[0:height, 0:width]
    hema = np.zeros((height, width))
    dab = np.zeros((height, width))
    cyto = np.zeros((height, width))
    membrane = np.zeros((height, width), dtype=bool)

    for cy, cx, outer, nucleus in _place_cells(rng, height, width, n_cells):
        r = np.hypot(yy - cy, xx - cx)
        ring = (r <= outer) & (r > outer - MEMBRANE_WIDTH)
        level = rng.uniform(0.3, 1.0)
        dab[ring] = np.maximum(dab[ring], level)
        membrane |= ring
        hema[r <= nucleus] = NUCLEUS_HEMA
        cyto[(r <= outer) & (r > nucleus)] = 0.35

    eosin = np.where(cyto > 0, cyto, 0.1 if n_cells else 0.0)
    zeros = np.zeros_like(hema)
    ihc_like = compose_rgb(hema, zeros, dab, m, i0, eps)
    he_like = compose_rgb(hema, eosin, zeros, m, i0, eps)
    truth = FixtureTruth(dab_truth=dab, hema_truth=hema, membrane_mask=membrane)
    return he_like, ihc_like, truth
