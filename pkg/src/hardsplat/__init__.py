"""Desk-scale differentiable Gaussian splatting with hard-Gaussian growing.

The package trains a cloud of anisotropic 3D Gaussians against posed
multi-view images with a tiled software rasterizer and a fully analytic
backward pass, and exposes a pluggable densification framework: the
classic average-gradient growing criterion plus order-statistic (pghgs),
rendering-error (rehgs) and budgeted (effi-hgs) hard-Gaussian variants.
"""

from .backward import ParamGrads, backward_view, finite_diff_grads
from .cameras import Camera, Scene, SceneSpec, gen_synthetic, init_cloud, project_point
from .densify import GrowthStats, PolicyConfig, run_interval_policy
from .gaussians import GaussianCloud, activate, build_covariance, evaluate_gaussian
from .losses import combined_loss, l1_loss, psnr, ssim_map
from .renderer import RasterSettings, RenderOutput, Splat2D, project_gaussian, rasterize, render_view
from .trainer import TrainConfig, TrainReport, evaluate, train

__all__ = [
    "Camera", "GaussianCloud", "GrowthStats", "ParamGrads", "PolicyConfig",
    "RasterSettings", "RenderOutput", "Scene", "SceneSpec", "Splat2D",
    "TrainConfig", "TrainReport", "activate", "backward_view",
    "build_covariance", "combined_loss", "evaluate", "evaluate_gaussian",
    "finite_diff_grads", "gen_synthetic", "init_cloud", "l1_loss",
    "project_gaussian", "project_point", "psnr", "rasterize", "render_view",
    "run_interval_policy", "ssim_map", "train",
]

__version__ = "0.1.0"
