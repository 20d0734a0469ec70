"""Stage-wise H&E to IHC translation objectives: stain deconvolution,
contrastive and gradient losses, pixel-space refinement and metrics."""

__version__ = "0.1.0"

from .config import LossConfig, StageConfig, ToolkitConfig, load_config
from .deconv import (StainMatrix, dab_concentration, normalize_weight, od_to_rgb,
                     rgb_to_od, separate_stains)
from .images import FixtureTruth, load_image, save_image, synth_fixture
from .losses import (EmbeddingPyramid, LossBreakdown, PyramidLayer, adaptive_weight,
                     asp_loss, dab_cf_loss, gaussian_pyramid_loss, gcbr_loss, info_nce,
                     patchnce_loss, total_loss)
from .metrics import MetricReport, evaluate_pair, gradient_mse, phash_distance, psnr, ssim
from .refine import (RefineTrace, finite_diff_grad, grad_dab_cf, grad_gcbr, patch_embed,
                     refine_stage, run_progressive)
