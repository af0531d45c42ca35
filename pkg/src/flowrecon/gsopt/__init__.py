from .losses import (
    ShapeMismatch,
    loss_gs,
    loss_gs_and_grad,
    loss_tgt,
    loss_tgt_and_grad,
    psnr,
    ssim,
    ssim_and_grad,
    ssim_map,
)
from .optim import (
    SOURCE,
    TARGET,
    Adam,
    AdcStats,
    ConfigError,
    EmptyViewSet,
    OptimizerConfig,
    clone_primitives,
    densify_and_prune,
    fit,
    mean_loss,
    scene_extent,
    split_primitives,
    write_training_log,
)
from .scale import NoValidPixels, align_metric_scale

__all__ = [
    "SOURCE",
    "TARGET",
    "Adam",
    "AdcStats",
    "ConfigError",
    "EmptyViewSet",
    "NoValidPixels",
    "OptimizerConfig",
    "ShapeMismatch",
    "align_metric_scale",
    "clone_primitives",
    "densify_and_prune",
    "fit",
    "loss_gs",
    "loss_gs_and_grad",
    "loss_tgt",
    "loss_tgt_and_grad",
    "mean_loss",
    "psnr",
    "scene_extent",
    "split_primitives",
    "ssim",
    "ssim_and_grad",
    "ssim_map",
    "write_training_log",
]
