"""Epipolar-weighted photometric losses, five-point relative pose and direct depth/pose optimization."""

from .geometry import CameraIntrinsics, Pose, essential_from_pose
from .fivepoint import decompose_essential, five_point, ransac_essential
from .warp import bilinear_sample, project_pixel, warp_image
from .losses import LossConfig, LossReport, total_loss
from .optim import adam_step, loss_and_gradients, optimize_direct
from .evaluation import atde, ate, depth_metrics, snippet_metrics

__all__ = [
    "CameraIntrinsics", "Pose", "essential_from_pose",
    "decompose_essential", "five_point", "ransac_essential",
    "bilinear_sample", "project_pixel", "warp_image",
    "LossConfig", "LossReport", "total_loss",
    "adam_step", "loss_and_gradients", "optimize_direct",
    "atde", "ate", "depth_metrics", "snippet_metrics",
]
__version__ = "0.1.0"
