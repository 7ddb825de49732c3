"""Noise-robust crossmodal representation learning via weighted product-of-experts fusion.

The package trains a crossmodal VAE on a synthetic multimodal task: per
modality encoders emit diagonal Gaussian experts over a shared latent
space, a credibility network reweighs each expert per latent dimension,
and the fused latent drives reconstruction of the target and auxiliary
modalities. Controllable corruption injectors and an experiment harness
compare product, weighted-product, and mixture fusion under noise.
"""

from .autodiff import Tensor, backward, finite_difference_check
from .data import (
    NoiseSpec,
    ToyDataset,
    add_gaussian_noise,
    apply_noise,
    corrupt_pixels,
    generate_dataset,
    load_dataset,
    render_grid,
    save_dataset,
)
from .estimator import CrossmodalVAE, OptState, adam_step, evaluate_params
from .gaussians import (
    DiagonalGaussian,
    FusionWeights,
    density_curve,
    gpoe_fuse,
    kl_std_normal,
    moe_component_sample,
    poe_fuse,
    sample_reparam,
)
from .metrics import MetricReport, PckCurve, auc, f1, iou, mean_epe, pck_curve
from .networks import (
    LossBreakdown,
    ModalityBatch,
    ModalityConfig,
    ModalitySpec,
    alpha_weights,
    decode,
    encode,
    infer_unimodal,
    init_params,
    loss_total,
    moe_elbo,
)

__version__ = "0.1.0"

__all__ = [
    "CrossmodalVAE",
    "DiagonalGaussian",
    "FusionWeights",
    "LossBreakdown",
    "MetricReport",
    "ModalityBatch",
    "ModalityConfig",
    "ModalitySpec",
    "NoiseSpec",
    "OptState",
    "PckCurve",
    "Tensor",
    "ToyDataset",
    "adam_step",
    "add_gaussian_noise",
    "alpha_weights",
    "apply_noise",
    "auc",
    "backward",
    "corrupt_pixels",
    "decode",
    "density_curve",
    "encode",
    "evaluate_params",
    "f1",
    "finite_difference_check",
    "generate_dataset",
    "gpoe_fuse",
    "infer_unimodal",
    "init_params",
    "iou",
    "kl_std_normal",
    "load_dataset",
    "loss_total",
    "mean_epe",
    "moe_component_sample",
    "moe_elbo",
    "pck_curve",
    "poe_fuse",
    "render_grid",
    "sample_reparam",
    "save_dataset",
]
