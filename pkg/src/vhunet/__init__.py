"""Hadamard-domain variational U-Net for bias-field correction."""

from .autodiff import Tensor, no_grad
from .biasfield import BiasFieldSpec, Phantom, corrupt, generate_field, make_phantom
from .errors import ConfigError, DataError, NumericalError, VhuNetError
from .estimator import BiasFieldCorrector
from .hadamard import (
    HadamardPlan, fwht, gate, hadamard_matrix, ht2d, ifwht, iht2d, scale, semi_soft,
)
from .losses import (
    LatentStats, LossConfig, elbo_loss, kl_divergence, latent_stats, scale_mle,
    smoothness_penalty, total_loss,
)
from .metrics import MetricsReport, aggregate, cnr, coco, cv, psnr, snr, ssim
from .model import VhuNet, VhuNetConfig, zero_transformer_weights
from .optim import AdamW
from .training import Sample, TrainConfig, TrainResult, train_model

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "AdamW",
    "HadamardPlan", "fwht", "ifwht", "ht2d", "iht2d", "hadamard_matrix",
    "scale", "gate", "semi_soft",
    "VhuNet", "VhuNetConfig", "zero_transformer_weights",
    "LossConfig", "LatentStats", "latent_stats", "scale_mle", "kl_divergence",
    "elbo_loss", "smoothness_penalty", "total_loss",
    "BiasFieldSpec", "Phantom", "generate_field", "corrupt", "make_phantom",
    "MetricsReport", "aggregate", "cv", "snr", "cnr", "ssim", "psnr", "coco",
    "BiasFieldCorrector",
    "Sample", "TrainConfig", "TrainResult", "train_model",
    "VhuNetError", "ConfigError", "DataError", "NumericalError",
]
