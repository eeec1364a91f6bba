"""Self-supervised monocular depth estimation, desk scale.

A dense-skip depth decoder with squeeze-excitation feature fusion, a pose
network, differentiable view synthesis, photometric training losses and a
distillation path, all running on a small float64 reverse-mode autodiff
engine.  See README.md for the command-line interface.
"""

from .arch import ArchConfig, DepthNet, PoseNet, audit_params, preset
from .evaluation import depth_metrics, interp_gap_analysis
from .geometry import CameraIntrinsics, DepthRange
from .gradsuite import run_suite
from .losses import LossConfig, total_loss
from .tensor import ContractViolation, GradCheckReport, Tape, Tensor, grad_check
from .training import TrainConfig, train_distill, train_selfsup

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CameraIntrinsics",
    "ContractViolation",
    "DepthNet",
    "DepthRange",
    "GradCheckReport",
    "LossConfig",
    "PoseNet",
    "Tape",
    "Tensor",
    "TrainConfig",
    "audit_params",
    "depth_metrics",
    "grad_check",
    "interp_gap_analysis",
    "preset",
    "run_suite",
    "total_loss",
    "train_distill",
    "train_selfsup",
    "__version__",
]
