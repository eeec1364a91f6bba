"""View-synthesis training losses and the distillation objective.

The photometric error blends a windowed SSIM term with an L1 term,
per-pixel minimum over source views; disparity smoothness is edge-aware
against the target image.  All scale losses are computed at full resolution:
coarser disparities are upsampled before depth conversion and warping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .geometry import (CameraIntrinsics, DepthRange, disp_to_depth,
                       synthesize_view, warp_grid)
from .ops import bilinear_resize, box_filter, resize_array
from .tensor import ContractViolation, Tensor


@dataclass
class LossConfig:
    alpha: float = 0.85            # SSIM share of the photometric error
    smooth_weight: float = 1e-3
    num_scales: int = 4
    automask: bool = False         # exclude pixels a static camera explains
    ssim_window: int = 3
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractViolation("alpha must lie in [0, 1]")
        if self.ssim_window % 2 == 0 or self.ssim_window < 1:
            raise ContractViolation("ssim window must be odd and positive")
        if self.num_scales < 1:
            raise ContractViolation("need at least one scale")


@dataclass
class DistillConfig:
    norm: str = "l1"               # or "l2"

    def __post_init__(self):
        if self.norm not in ("l1", "l2"):
            raise ContractViolation(f"unknown distillation norm {self.norm!r}")


@dataclass
class WarpBatch:
    """Everything total_loss needs to rebuild the target from its sources.

    transforms map target-camera coordinates into each source camera.
    """
    target: Tensor
    sources: list
    transforms: list
    cam: CameraIntrinsics
    depth_range: DepthRange = field(default_factory=DepthRange)


def _box_mean(x: Tensor, window: int) -> Tensor:
    """Windowed average with reflect padding."""
    return box_filter(x, window, pad_mode="reflect")


def ssim(a: Tensor, b: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Per-pixel, per-channel structural similarity over a small window."""
    cfg = cfg or LossConfig()
    if a.data.shape != b.data.shape:
        raise ContractViolation("ssim inputs must share a shape")
    win, c1, c2 = cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2
    mu_a = _box_mean(a, win)
    mu_b = _box_mean(b, win)
    mu_aa = tt.mul(mu_a, mu_a)
    mu_bb = tt.mul(mu_b, mu_b)
    mu_ab = tt.mul(mu_a, mu_b)
    var_a = tt.sub(_box_mean(tt.mul(a, a), win), mu_aa)
    var_b = tt.sub(_box_mean(tt.mul(b, b), win), mu_bb)
    cov = tt.sub(_box_mean(tt.mul(a, b), win), mu_ab)
    num = tt.mul(tt.add_scalar(tt.mul_scalar(mu_ab, 2.0), c1),
                 tt.add_scalar(tt.mul_scalar(cov, 2.0), c2))
    den = tt.mul(tt.add_scalar(tt.add(mu_aa, mu_bb), c1),
                 tt.add_scalar(tt.add(var_a, var_b), c2))
    return tt.div(num, den)


def photometric_error(target: Tensor, pred: Tensor,
                      cfg: LossConfig | None = None) -> Tensor:
    """(alpha/2) * (1 - SSIM) + (1 - alpha) * |target - pred|, channel-averaged
    per term; returns a (b, 1, h, w) map."""
    cfg = cfg or LossConfig()
    s = tt.mean_channels(ssim(target, pred, cfg))
    l1 = tt.mean_channels(tt.absolute(tt.sub(target, pred)))
    ssim_term = tt.mul_scalar(tt.add_scalar(tt.neg(s), 1.0), cfg.alpha / 2.0)
    return tt.add(ssim_term, tt.mul_scalar(l1, 1.0 - cfg.alpha))


def min_reprojection(errors: list, identity_errors: list | None = None):
    """Per-pixel minimum across source error maps.

    With identity errors (unwarped sources scored against the target) a keep
    mask is returned: pixels where the identity error undercuts the warped
    minimum are excluded, removing regions a static camera already explains.
    """
    if not errors:
        raise ContractViolation("min_reprojection needs at least one error map")
    out = errors[0]
    for e in errors[1:]:
        out = tt.minimum(out, e)
    if identity_errors is None:
        return out, None
    ident = identity_errors[0].data.copy()
    for e in identity_errors[1:]:
        ident = np.minimum(ident, e.data)
    keep = out.data <= ident
    return out, keep


def masked_mean(x: Tensor, keep: np.ndarray | None) -> Tensor:
    """Mean over kept pixels; falls back to the full mean when the mask is
    empty (a fully static view) or absent."""
    if keep is None or not keep.any():
        return tt.mean_all(x)
    frac = tt.sum_all(tt.mul(x, Tensor(keep.astype(np.float64))))
    return tt.mul_scalar(frac, 1.0 / float(keep.sum()))


def _forward_diff(x: Tensor, axis: int) -> Tensor:
    n = x.data.shape[axis]
    hi = tt.slice_axis(x, axis, 1, n)
    lo = tt.slice_axis(x, axis, 0, n - 1)
    return tt.sub(hi, lo)


def smoothness(disp: Tensor, image: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity.

    The disparity is divided by its per-sample spatial mean; forward
    differences are weighted by exp(-|image gradient|), image gradients
    averaged over channels.
    """
    if disp.data.shape[1] != 1:
        raise ContractViolation("smoothness expects a single-channel disparity")
    if disp.data.shape[2:] != image.data.shape[2:]:
        raise ContractViolation("disparity and image resolutions differ")
    inv_mean = tt.reciprocal(tt.mean_spatial(disp))
    dn = tt.mul_gate(disp, inv_mean)
    loss = None
    for axis in (3, 2):
        dgrad = tt.absolute(_forward_diff(dn, axis))
        igrad = tt.mean_channels(tt.absolute(_forward_diff(image, axis)))
        term = tt.mean_all(tt.mul(dgrad, tt.exp(tt.neg(igrad))))
        loss = term if loss is None else tt.add(loss, term)
    return loss


def total_loss(disparities: list, batch: WarpBatch,
               cfg: LossConfig | None = None):
    """Average over scales of (min-reprojection + weighted smoothness).

    Each scale's disparity is upsampled to the target resolution before depth
    conversion, warping and scoring.  Returns (loss tensor, breakdown dict of
    plain floats: total, re_<i>, smooth_<i>).
    """
    cfg = cfg or LossConfig()
    if len(disparities) != cfg.num_scales:
        raise ContractViolation(
            f"expected {cfg.num_scales} disparity scales, got {len(disparities)}")
    if len(batch.sources) != len(batch.transforms):
        raise ContractViolation("one transform per source view is required")
    if not batch.sources:
        raise ContractViolation("at least one source view is required")
    h, w = batch.target.data.shape[2:]
    identity_errors = None
    if cfg.automask:
        identity_errors = [photometric_error(batch.target, s, cfg)
                           for s in batch.sources]

    total = None
    breakdown: dict[str, float] = {}
    for i, disp in enumerate(disparities):
        if disp.data.shape[2:] != (h, w):
            disp = bilinear_resize(disp, h, w)
        depth = disp_to_depth(disp, batch.depth_range)
        errors = []
        for src, transform in zip(batch.sources, batch.transforms):
            grid, _ = warp_grid(depth, batch.cam, transform)
            errors.append(photometric_error(batch.target,
                                            synthesize_view(src, grid), cfg))
        err_min, keep = min_reprojection(errors, identity_errors)
        re = masked_mean(err_min, keep)
        sm = smoothness(disp, batch.target)
        term = tt.add(re, tt.mul_scalar(sm, cfg.smooth_weight))
        total = term if total is None else tt.add(total, term)
        breakdown[f"re_{i}"] = float(re.data)
        breakdown[f"smooth_{i}"] = float(sm.data)
    total = tt.mul_scalar(total, 1.0 / cfg.num_scales)
    if not np.isfinite(total.data):
        raise ContractViolation("total loss is non-finite")
    breakdown["total"] = float(total.data)
    return total, breakdown


def distill_loss(teacher_disps: list, student_disps: list,
                 cfg: DistillConfig | None = None) -> Tensor:
    """Mean per-pixel deviation between teacher and student disparities,
    averaged over scales.  Teacher maps are plain arrays (already detached)
    and are resized to each student scale."""
    cfg = cfg or DistillConfig()
    if len(teacher_disps) != len(student_disps):
        raise ContractViolation("teacher/student scale count mismatch")
    if not student_disps:
        raise ContractViolation("distill_loss needs at least one scale")
    total = None
    for t_map, s_map in zip(teacher_disps, student_disps):
        t_arr = t_map.data if isinstance(t_map, Tensor) else np.asarray(t_map)
        if t_arr.shape[2:] != s_map.data.shape[2:]:
            t_arr = resize_array(t_arr, *s_map.data.shape[2:])
        diff = tt.sub(s_map, Tensor(t_arr))
        if cfg.norm == "l1":
            term = tt.mean_all(tt.absolute(diff))
        else:
            term = tt.mean_all(tt.mul(diff, diff))
        total = term if total is None else tt.add(total, term)
    return tt.mul_scalar(total, 1.0 / len(student_disps))
