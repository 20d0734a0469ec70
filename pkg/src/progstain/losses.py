"""Loss kernels for the three-stage translation objective.

Stage 1 (structure) combines an adversarial term with PatchNCE, adaptive
supervised PatchNCE and a Gaussian-pyramid reconstruction loss.  Stage 2
matches DAB concentration maps, stage 3 matches DAB-weighted Sobel
gradient magnitudes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .config import LossConfig
from .deconv import (DEFAULT_EPS, DEFAULT_I0, StainMatrix, dab_concentration,
                     normalize_weight)
from .gradients import image_gradient_magnitude

# g(t/T): how fast the similarity weighting is phased in
SCHEDULES = {
    "linear": lambda u: u,
    "cosine": lambda u: 0.5 * (1.0 - np.cos(np.pi * u)),
}

# h(sim): monotone map from cosine similarity to a weight in [0, 1]
WEIGHT_MAPS = {
    "affine": lambda s: np.clip((1.0 + s) / 2.0, 0.0, 1.0),
    "relu": lambda s: np.clip(s, 0.0, 1.0),
}

GP_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# --- contrastive terms ------------------------------------------------------

@dataclass
class PyramidLayer:
    """Matched embeddings for one feature layer.

    ``generated`` and ``real`` are ``(S, d)``; ``negatives`` is ``(S, N, d)``.
    """

    generated: np.ndarray
    real: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.generated = np.asarray(self.generated, dtype=np.float64)
        self.real = np.asarray(self.real, dtype=np.float64)
        self.negatives = np.asarray(self.negatives, dtype=np.float64)
        s, d = self.generated.shape
        if self.real.shape != (s, d):
            raise ValueError("generated and real embeddings differ in shape")
        if self.negatives.size == 0:
            self.negatives = self.negatives.reshape(s, 0, d)
        if self.negatives.ndim != 3 or self.negatives.shape[0] != s or self.negatives.shape[2] != d:
            raise ValueError(f"negatives must be (S, N, d) = ({s}, N, {d})")

    @property
    def size(self) -> int:
        return self.generated.shape[0]


@dataclass
class EmbeddingPyramid:
    layers: list[PyramidLayer] = field(default_factory=list)


def _info_nce_rows(gen, real, negatives, tau):
    pos = np.einsum("sd,sd->s", gen, real) / tau
    neg = np.einsum("sd,snd->sn", gen, negatives) / tau
    logits = np.concatenate([pos[:, None], neg], axis=1)
    return logsumexp(logits, axis=1) - pos


def info_nce(pos_gen, pos_real, negatives, tau: float) -> float:
    """Contrastive loss of one generated embedding against its positive.

    ``-log(exp(g.p/tau) / (exp(g.p/tau) + sum_n exp(g.n/tau)))``, evaluated
    with log-sum-exp.  An empty negative set gives exactly zero.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    gen = np.asarray(pos_gen, dtype=np.float64)
    real = np.asarray(pos_real, dtype=np.float64)
    if gen.shape != real.shape or gen.ndim != 1:
        raise ValueError("positive embeddings must be vectors of equal dimension")
    negs = np.asarray(negatives, dtype=np.float64).reshape(-1, gen.shape[0]) \
        if len(negatives) else np.zeros((0, gen.shape[0]))
    return float(_info_nce_rows(gen[None], real[None], negs[None], tau)[0])


def cosine_similarity(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.clip(num / np.maximum(den, 1e-300), -1.0, 1.0)


def adaptive_weight(sim, t: float, total: float, schedule: str = "linear",
                    weight_map: str = "affine"):
    """Per-patch weight ``(1 - g(t/T)) + g(t/T) * h(sim)``."""
    if total <= 0:
        raise ValueError("total steps T must be positive")
    if not 0 <= t <= total:
        raise ValueError("step t must lie in [0, T]")
    g = SCHEDULES[schedule](t / total)
    w = (1.0 - g) * 1.0 + g * WEIGHT_MAPS[weight_map](np.asarray(sim, dtype=np.float64))
    return float(w) if np.ndim(w) == 0 else w


def _raw_weights(layer: PyramidLayer, cfg: LossConfig) -> np.ndarray:
    if layer.size == 0:
        raise ValueError("pyramid layer has no locations")
    sim = cosine_similarity(layer.generated, layer.real)
    return np.asarray(adaptive_weight(sim, cfg.step, cfg.total_steps,
                                      cfg.schedule, cfg.weight_map), dtype=np.float64)


def layer_weights(pyr: EmbeddingPyramid, cfg: LossConfig) -> list[np.ndarray]:
    """Normalised patch weights per layer; each layer's weights sum to 1."""
    return [w / w.sum() for w in (_raw_weights(layer, cfg) for layer in pyr.layers)]


def _weighted_pyramid_nce(pyr: EmbeddingPyramid, tau: float, weights) -> float:
    if not pyr.layers:
        raise ValueError("embedding pyramid is empty")
    if not tau > 0:
        raise ValueError("tau must be positive")
    total = 0.0
    for layer, w in zip(pyr.layers, weights):
        if layer.size == 0:
            raise ValueError("pyramid layer has no locations")
        nce = _info_nce_rows(layer.generated, layer.real, layer.negatives, tau)
        total += float(np.sum(w * nce) / np.sum(w))
    return total


def asp_loss(pyr: EmbeddingPyramid, cfg: LossConfig) -> float:
    """Adaptive supervised PatchNCE summed over layers.

    Within a layer, the weights ``w_t`` are normalised to a convex
    combination, so at ``t = 0`` this is the per-layer mean InfoNCE.
    """
    weights = [_raw_weights(layer, cfg) for layer in pyr.layers]
    return _weighted_pyramid_nce(pyr, cfg.tau, weights)


def patchnce_loss(pyr: EmbeddingPyramid, tau: float) -> float:
    """Uniformly weighted PatchNCE: sum over layers of the mean InfoNCE."""
    return _weighted_pyramid_nce(pyr, tau, [np.ones(layer.size) for layer in pyr.layers])


# --- image-space terms ------------------------------------------------------

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _check_rgb_pair(a, b):
    a, b = _check_pair(a, b)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) images, got {a.shape}")
    return a, b


def pyramid_reduce(img: np.ndarray) -> np.ndarray:
    """5-tap binomial blur then 2x decimation along both spatial axes."""
    out = ndimage.correlate1d(img, GP_KERNEL, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, GP_KERNEL, axis=1, mode="nearest")
    return out[::2, ::2]


def gaussian_pyramid(img, levels: int) -> list[np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(pyramid_reduce(pyr[-1]))
    return pyr


def gaussian_pyramid_loss(a, b, levels: int) -> float:
    """Sum over pyramid levels of the mean absolute difference."""
    a, b = _check_pair(a, b)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(a.shape[:2]) < 2 ** (levels - 1):
        raise ValueError(f"too many pyramid levels ({levels}) for image {a.shape[:2]}")
    return float(sum(np.mean(np.abs(x - y))
                     for x, y in zip(gaussian_pyramid(a, levels), gaussian_pyramid(b, levels))))


def dab_cf_loss(real, gen, m: StainMatrix | None = None,
                i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> float:
    """Mean squared difference of the DAB concentration maps."""
    real, gen = _check_rgb_pair(real, gen)
    diff = dab_concentration(real, m, i0, eps) - dab_concentration(gen, m, i0, eps)
    return float(np.mean(diff ** 2))


def weighted_gradient_error(eta, d_gen, d_real, floor: float = 1e-12) -> float:
    total = float(np.sum(eta))
    if total < floor:
        return 0.0
    return float(np.sum(eta * (d_gen - d_real) ** 2) / total)


def gcbr_loss(real, gen, m: StainMatrix | None = None,
              i0: float = DEFAULT_I0, eps: float = DEFAULT_EPS) -> float:
    """DAB-weighted squared error between Sobel gradient magnitudes.

    The weight map is the min-max normalised DAB concentration of ``real``;
    when it is identically zero the loss is zero.
    """
    real, gen = _check_rgb_pair(real, gen)
    eta = normalize_weight(dab_concentration(real, m, i0, eps))
    return weighted_gradient_error(eta, image_gradient_magnitude(gen),
                                   image_gradient_magnitude(real))


# --- stage objective --------------------------------------------------------

TERMS = ("adv", "patchnce", "asp", "gp", "dab_cf", "gcbr")
STAGE_TERMS = {1: ("adv", "patchnce", "asp", "gp"), 2: ("dab_cf",), 3: ("gcbr",)}


@dataclass(frozen=True)
class LossBreakdown:
    stage: int
    total: float
    adv: float = 0.0
    patchnce: float = 0.0
    asp: float = 0.0
    gp: float = 0.0
    dab_cf: float = 0.0
    gcbr: float = 0.0

    def active(self) -> dict:
        """Stage index, the stage's own terms and the weighted total."""
        out = {"stage": self.stage}
        out.update({k: getattr(self, k) for k in STAGE_TERMS[self.stage]})
        out["total"] = self.total
        return out

    def as_dict(self) -> dict:
        return asdict(self)


def stage_weights(stage: int, cfg: LossConfig) -> dict[str, float]:
    if stage == 1:
        return {"adv": 1.0, "patchnce": cfg.lambda_patchnce,
                "asp": cfg.lambda_asp, "gp": cfg.lambda_gp}
    if stage == 2:
        return {"dab_cf": cfg.lambda_dab}
    if stage == 3:
        return {"gcbr": cfg.lambda_grad}
    raise ValueError(f"invalid stage {stage!r}; expected 1, 2 or 3")


def total_loss(stage: int, terms: dict, cfg: LossConfig | None = None) -> LossBreakdown:
    """Weighted objective for one stage.

    ``terms`` maps term names to raw values; terms not used by ``stage``
    are reported but do not enter the total.  ``adv`` defaults to 0.
    """
    cfg = cfg or LossConfig()
    weights = stage_weights(stage, cfg)
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    values = {k: float(terms.get(k, 0.0)) for k in TERMS}
    total = sum(weights[k] * values[k] for k in weights)
    return LossBreakdown(stage=stage, total=float(total), **values)
