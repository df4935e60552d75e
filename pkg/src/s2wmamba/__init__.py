"""Wavelet-disentangled dual-branch pansharpening with selective state-space
fusion, a desk-scale trainer, and the standard quality-metric suite."""

from .tensor import Tensor, Parameter, Module, check_gradients, no_grad
from .wavelet import dwt2d, idwt2d, dwt1d, idwt1d, build_pyramid2d, build_pyramid1d
from .fmamba import FMambaParams, SsmParams, selective_scan, fmamba_block, rasterize, derasterize
from .branches import SpectralBranch, SpatialBranch, bicubic_upsample
from .msdg import MsdgParams, msdg_gate, dual_msdg
from .network import (
    S2WMambaNet,
    ModelConfig,
    TrainConfig,
    AblationConfig,
    l1_loss,
    train_toy,
    apply_ablation,
    save_checkpoint,
    load_checkpoint,
)
from .dataset import SceneSpec, Triplet, generate_scenes, wald_degrade, read_image, write_image
from .metrics import MetricsReport, psnr, sam, ergas, q2n, d_lambda, d_s, hqnr

__version__ = "0.1.0"
