"""Stage-wise pixel-space refinement.

The colour (stage 2) and boundary (stage 3) objectives are minimised
directly over pixel values with analytic gradients.  Each stage starts
from the previous stage's output and only sees its own loss, which is how
freezing earlier stages is realised without networks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import EmbedConfig, LossConfig, StageConfig
from .deconv import (DEFAULT_EPS, DEFAULT_I0, StainMatrix, dab_concentration,
                     normalize_weight)
from .gradients import (LUMA_WEIGHTS, SOBEL_X, SOBEL_Y, correlate3,
                        correlate3_adjoint, image_gradient_magnitude, to_gray)
from .losses import (EmbeddingPyramid, LossBreakdown, PyramidLayer, _check_rgb_pair,
                     dab_cf_loss, gaussian_pyramid, gcbr_loss, total_loss)

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
# losses at or below this are numerically zero; Adam would otherwise
# rescale round-off gradients into full-size steps
LOSS_FLOOR = 1e-24
GRADCHECK_TOL = {"dab_cf": 1e-4, "gcbr": 1e-3}


class DivergenceError(RuntimeError):
    pass


# --- analytic gradients -----------------------------------------------------

def grad_dab_cf(real, gen, m: StainMatrix | None = None,
                i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Gradient of the DAB colour-fidelity loss w.r.t. the generated pixels."""
    real, gen = _check_rgb_pair(real, gen)
    m = m or StainMatrix.default()
    n = real.shape[0] * real.shape[1]
    resid = dab_concentration(gen, m, i0, eps) - dab_concentration(real, m, i0, eps)
    dl_dc = (2.0 / n) * resid
    # dOD/dI = -1 / (ln10 (I + eps)); dc/dOD_k = unmix[k, DAB]
    dod_di = -1.0 / (np.log(10.0) * (gen + eps))
    return dl_dc[..., None] * m.dab_unmix * dod_di


def grad_gcbr(real, gen, m: StainMatrix | None = None,
              i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Gradient of the boundary loss w.r.t. the generated pixels.

    The weight map depends on ``real`` only and is held constant.  Where the
    generated gradient magnitude is zero the subgradient 0 is used.
    """
    real, gen = _check_rgb_pair(real, gen)
    eta = normalize_weight(dab_concentration(real, m, i0, eps))
    eta_sum = eta.sum()
    if eta_sum < 1e-12:
        return np.zeros_like(gen)
    gray = to_gray(gen)
    gx = correlate3(gray, SOBEL_X)
    gy = correlate3(gray, SOBEL_Y)
    d_gen = np.hypot(gx, gy)
    d_real = image_gradient_magnitude(real)
    dl_dd = 2.0 * eta * (d_gen - d_real) / eta_sum
    safe = np.where(d_gen > 0, d_gen, 1.0)
    scale = np.where(d_gen > 0, dl_dd / safe, 0.0)
    dl_dgray = correlate3_adjoint(scale * gx, SOBEL_X) + correlate3_adjoint(scale * gy, SOBEL_Y)
    return dl_dgray[..., None] * LUMA_WEIGHTS


LOSSES: dict[str, tuple[Callable, Callable]] = {
    "dab_cf": (dab_cf_loss, grad_dab_cf),
    "gcbr": (gcbr_loss, grad_gcbr),
}


def finite_diff_grad(loss, real, gen, m: StainMatrix | None = None,
                     i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient w.r.t. every pixel-channel of ``gen``.

    ``loss`` is ``"dab_cf"``, ``"gcbr"`` or any callable ``f(gen) -> float``.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    if callable(loss):
        fn = loss
    else:
        kernel = LOSSES[loss][0]
        fn = lambda x: kernel(real, x, m, i0, eps)  # noqa: E731
    gen = np.array(gen, dtype=np.float64)
    grad = np.zeros_like(gen)
    flat, gflat = gen.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn(gen)
        flat[k] = orig - h
        down = fn(gen)
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, mask=None) -> float:
    """``max |a - n| / max |n|`` over the (optionally masked) entries."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if mask is not None:
        a, n = a[mask], n[mask]
    scale = np.max(np.abs(n)) if n.size else 0.0
    err = np.max(np.abs(a - n)) if n.size else 0.0
    return float(err / scale) if scale > 0 else float(err)


def smooth_pixel_mask(gen, floor: float = 1e-3) -> np.ndarray:
    """Pixels whose 3x3 neighbourhood keeps the gradient magnitude above ``floor``.

    Perturbing a pixel moves ``D`` only inside its 3x3 window, so pixels
    near a ``D = 0`` kink are excluded from gradient checks.
    """
    d = image_gradient_magnitude(gen)
    padded = np.pad(d, 1, mode="edge")
    h, w = d.shape
    low = np.zeros((h, w), dtype=bool)
    for a in range(3):
        for b in range(3):
            low |= padded[a:a + h, b:b + w] <= floor
    return np.broadcast_to(~low[..., None], gen.shape)


def gradcheck(loss_id: str, seed: int, size: int = 8, m: StainMatrix | None = None,
              i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS, h: float = 1e-5) -> float:
    """Relative error of the analytic gradient on a random ``size x size`` pair."""
    rng = np.random.default_rng(seed)
    real = rng.uniform(0.05, 0.95, (size, size, 3))
    gen = rng.uniform(0.05, 0.95, (size, size, 3))
    _, grad = LOSSES[loss_id]
    analytic = grad(real, gen, m, i0, eps)
    numeric = finite_diff_grad(loss_id, real, gen, m, i0, eps, h)
    mask = smooth_pixel_mask(gen) if loss_id == "gcbr" else None
    return relative_error(analytic, numeric, mask)


# --- optimisation -----------------------------------------------------------

@dataclass
class RefineTrace:
    stage: int
    losses: list[float] = field(default_factory=list)
    initial: LossBreakdown | None = None
    final: LossBreakdown | None = None
    iterations: int = 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"iter": i, "loss": v}) + "\n"
                       for i, v in enumerate(self.losses))


def _stage_loss(stage: int, real, img, m, i0, eps, loss_cfg: LossConfig) -> LossBreakdown:
    if stage == 2:
        return total_loss(2, {"dab_cf": dab_cf_loss(real, img, m, i0, eps)}, loss_cfg)
    return total_loss(3, {"gcbr": gcbr_loss(real, img, m, i0, eps)}, loss_cfg)


def refine_stage(init, real, cfg: StageConfig, loss_cfg: LossConfig | None = None,
                 m: StainMatrix | None = None, i0: float = DEFAULT_I0,
                 eps: float = DEFAULT_EPS, callback: Callable | None = None):
    """Minimise one stage's weighted loss over the pixels of ``init``.

    Pixels are clamped to [0, 1] after every step.  Iteration stops after
    ``cfg.max_iters`` steps, once the relative change in loss drops below
    ``cfg.stop_tol``, or when the loss is numerically zero.  ``callback(iteration, image)`` is called after every
    step.

    Returns
    -------
    image : ndarray
    trace : RefineTrace
        ``trace.losses[k]`` is the weighted loss after ``k`` steps.

    Raises
    ------
    DivergenceError
        If the loss exceeds ten times its initial value.
    """
    cfg.validate()
    loss_cfg = loss_cfg or LossConfig()
    m = m or StainMatrix.default()
    real, img = _check_rgb_pair(real, init)
    img = img.copy()
    weight = loss_cfg.lambda_dab if cfg.stage == 2 else loss_cfg.lambda_grad
    grad_fn = grad_dab_cf if cfg.stage == 2 else grad_gcbr

    trace = RefineTrace(stage=cfg.stage)
    current = _stage_loss(cfg.stage, real, img, m, i0, eps, loss_cfg)
    trace.initial = current
    trace.losses.append(current.total)
    first = current.total

    m1 = np.zeros_like(img)
    m2 = np.zeros_like(img)
    for it in range(1, cfg.max_iters + 1):
        if current.total <= LOSS_FLOOR:
            break
        g = weight * grad_fn(real, img, m, i0, eps)
        if cfg.optimizer == "adam":
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            m_hat = m1 / (1 - cfg.beta1 ** it)
            v_hat = m2 / (1 - cfg.beta2 ** it)
            step = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        else:
            step = g
        img = np.clip(img - cfg.learning_rate * step, 0.0, 1.0)
        if callback is not None:
            callback(it, img)

        previous = current.total
        current = _stage_loss(cfg.stage, real, img, m, i0, eps, loss_cfg)
        trace.losses.append(current.total)
        trace.iterations = it
        if current.total > DIVERGENCE_FACTOR * max(first, LOSS_FLOOR):
            raise DivergenceError(
                f"stage {cfg.stage} diverged at iteration {it}: "
                f"loss {current.total:.6g} > {DIVERGENCE_FACTOR:g} x initial {first:.6g}")
        if previous > 0 and abs(previous - current.total) / previous < cfg.stop_tol:
            break

    trace.final = current
    log.info("stage %d: loss %.6g -> %.6g in %d iterations",
             cfg.stage, first, current.total, trace.iterations)
    return img, trace


@dataclass
class ProgressiveResult:
    image: np.ndarray
    stage2_output: np.ndarray
    stage2: RefineTrace
    stage3: RefineTrace
    dab_cf_drift: float

    def summary(self) -> dict:
        return {
            "stage2": {"initial": self.stage2.losses[0], "final": self.stage2.losses[-1],
                       "iterations": self.stage2.iterations},
            "stage3": {"initial": self.stage3.losses[0], "final": self.stage3.losses[-1],
                       "iterations": self.stage3.iterations},
            "dab_cf_drift": self.dab_cf_drift,
        }


def run_progressive(init, real, stage2: StageConfig | None = None,
                    stage3: StageConfig | None = None, loss_cfg: LossConfig | None = None,
                    m: StainMatrix | None = None, i0: float = DEFAULT_I0,
                    eps: float = DEFAULT_EPS) -> ProgressiveResult:
    """Colour refinement followed by boundary refinement.

    ``init`` stands in for the structure-stage output.  Stage 3 starts from
    exactly the image stage 2 returned.  ``dab_cf_drift`` is the change in
    the unweighted colour loss caused by stage 3, which does not constrain it.
    """
    stage2 = stage2 or StageConfig(stage=2)
    stage3 = stage3 or StageConfig(stage=3)
    m = m or StainMatrix.default()
    mid, trace2 = refine_stage(init, real, stage2, loss_cfg, m, i0, eps)
    final, trace3 = refine_stage(mid, real, stage3, loss_cfg, m, i0, eps)
    drift = dab_cf_loss(real, final, m, i0, eps) - dab_cf_loss(real, mid, m, i0, eps)
    return ProgressiveResult(final, mid, trace2, trace3, float(drift))


# --- surrogate encoder ------------------------------------------------------

def _projection(seed: int, in_dim: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((in_dim, dim)) / np.sqrt(in_dim)


def patch_embed(img, seed: int = 0, patch: int = 8, dim: int = 64,
                stride: int = 4) -> np.ndarray:
    """Unit-norm embeddings of the image's ``patch x patch`` tiles.

    Patches on a ``stride`` grid are shifted to zero-centred intensities
    (``x - 0.5``), flattened and mapped through a fixed Gaussian random
    projection drawn from ``seed``.

    Returns
    -------
    ndarray of shape (S, dim), one row per grid location in raster order.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(img, (patch, patch), axis=(0, 1))
    windows = windows[::stride, ::stride]
    if windows.shape[0] == 0 or windows.shape[1] == 0:
        raise ValueError("empty patch grid")
    flat = (windows.reshape(-1, c * patch * patch) - 0.5)
    z = flat @ _projection(seed, flat.shape[1], dim)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norms, 1e-12)


def _negatives_from(real: np.ndarray) -> np.ndarray:
    """For each location, every other location's embedding."""
    s = real.shape[0]
    idx = np.array([[j for j in range(s) if j != i] for i in range(s)], dtype=int).reshape(s, s - 1)
    return real[idx]


def embed_pyramid(gen, real, cfg: EmbedConfig | None = None, levels: int = 1,
                  max_locations: int = 64) -> EmbeddingPyramid:
    """Embedding pyramid comparing ``gen`` against ``real``.

    One layer per Gaussian-pyramid level that still fits a patch.  The
    negatives for a location are the ``real`` embeddings at the other
    sampled locations of the same layer.
    """
    cfg = cfg or EmbedConfig()
    layers = []
    for k, (g, r) in enumerate(zip(gaussian_pyramid(gen, levels), gaussian_pyramid(real, levels))):
        if cfg.patch > min(g.shape[:2]):
            break
        zg = patch_embed(g, cfg.seed + k, cfg.patch, cfg.dim, cfg.stride)
        zr = patch_embed(r, cfg.seed + k, cfg.patch, cfg.dim, cfg.stride)
        if zg.shape[0] > max_locations:
            pick = np.sort(np.random.default_rng(cfg.seed + 1000 + k)
                           .choice(zg.shape[0], max_locations, replace=False))
            zg, zr = zg[pick], zr[pick]
        layers.append(PyramidLayer(zg, zr, _negatives_from(zr)))
    if not layers:
        raise ValueError("image too small for a single embedding patch")
    return EmbeddingPyramid(layers)
