"""U-Net generator/discriminator pairs joined by cross-network skip connections."""
from .backbone import ShapeError, UNet, UNetConfig
from .config import ConfigError, ExperimentConfig, load_config
from .data import PairedDataset, SyntheticTaskConfig, load_paired_dir, make_synthetic
from .latent import GaussianLatent, cross_kl, kl_to_standard_normal, reparameterize, weighted_discriminator_kl
from .metrics import MetricReport, psnr, ssim, stability
from .objectives import LossBreakdown, LossWeights
from .topology import PRESETS, TopologyConfig, UUNetModel, Variant, gradient_reachability, wire
from .trainer import Trainer, TrainConfig, TrainingAborted

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "GaussianLatent", "LossBreakdown", "LossWeights", "MetricReport",
    "PRESETS", "PairedDataset", "ShapeError", "SyntheticTaskConfig", "TopologyConfig", "TrainConfig",
    "Trainer", "TrainingAborted", "UNet", "UNetConfig", "UUNetModel", "Variant", "cross_kl",
    "gradient_reachability", "kl_to_standard_normal", "load_config", "load_paired_dir", "make_synthetic",
    "psnr", "reparameterize", "ssim", "stability", "weighted_discriminator_kl", "wire",
]
