"""Depth evaluation: standard error/accuracy metrics with median scaling,
and a resolution study that localizes upsampling error by ground-truth
gradient magnitude.

Metric conventions: only pixels with positive ground truth count; the
prediction is median-scaled (multiplied by median(gt)/median(pred)) before
clamping to [min_depth, max_depth]; threshold accuracies use strict
inequality max(gt/pred, pred/gt) < 1.25^k.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import disp_to_depth_array
from .ops import resize_array
from .tensor import ContractViolation, Tensor

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")

# conventional central evaluation window for driving captures, as fractions
# (top, bottom, left, right) of the map extent
STANDARD_EVAL_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def depth_metrics(pred, gt, min_depth: float = 1e-3, max_depth: float = 80.0,
                  median_scale: bool = True,
                  crop: tuple | None = None) -> DepthMetrics:
    """Metrics over one prediction/ground-truth pair (any equal shape).

    crop, when given, restricts evaluation to the fractional window
    (top, bottom, left, right) of the last two axes.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation("prediction and ground truth shapes differ")
    valid = gt > 0
    if crop is not None:
        top, bottom, left, right = crop
        h, w = gt.shape[-2:]
        box = np.zeros_like(valid)
        box[..., int(top * h):int(bottom * h),
            int(left * w):int(right * w)] = True
        valid &= box
    if not valid.any():
        raise ContractViolation("no valid ground-truth pixels")
    p = pred[valid]
    g = gt[valid]
    if np.any(p <= 0):
        raise ContractViolation("predicted depth must be positive")
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, min_depth, max_depth)
    ratio = np.maximum(g / p, p / g)
    diff = g - p
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25 ** 2)),
        a3=float(np.mean(ratio < 1.25 ** 3)))


def mean_metrics(items: list) -> DepthMetrics:
    if not items:
        raise ContractViolation("nothing to average")
    return DepthMetrics(**{n: float(np.mean([getattr(m, n) for m in items]))
                           for n in METRIC_NAMES})


def metrics_lines(m: DepthMetrics) -> list:
    header = "  ".join(f"{n:>10}" for n in METRIC_NAMES)
    values = "  ".join(f"{getattr(m, n):>10.5f}" for n in METRIC_NAMES)
    return [header, values]


def metrics_table(runs: list) -> list:
    """One aligned row per (label, resolution, metrics) entry."""
    if not runs:
        raise ContractViolation("metrics table needs at least one run")
    cells = "  ".join(f"{n:>10}" for n in METRIC_NAMES)
    out = [f"{'method':<24}{'resolution':>12}  {cells}"]
    for label, resolution, m in runs:
        cells = "  ".join(f"{getattr(m, n):>10.5f}" for n in METRIC_NAMES)
        out.append(f"{label:<24}{resolution:>12}  {cells}")
    return out


def write_metrics(path, m: DepthMetrics) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for n in METRIC_NAMES:
            fh.write(f"{n}={getattr(m, n)!r}\n")


def read_metrics(path) -> DepthMetrics:
    kv = {}
    with open(path, encoding="ascii") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{ln}: expected key=value")
            k, v = line.split("=", 1)
            kv[k] = float(v)
    missing = set(METRIC_NAMES) - set(kv)
    if missing:
        raise ContractViolation(f"metrics file misses {sorted(missing)}")
    return DepthMetrics(**{n: kv[n] for n in METRIC_NAMES})


def evaluate_depth_net(net, samples: list, depth_range,
                       crop: tuple | None = None) -> DepthMetrics:
    """Full-resolution disparity head scored against sample ground truth."""
    per_image = []
    for s in samples:
        if s.gt_depth is None:
            raise ContractViolation("evaluation needs ground-truth depth")
        disp = net(Tensor(s.target[None]), training=False)[0].data
        depth = disp_to_depth_array(disp, depth_range)
        per_image.append(depth_metrics(depth[0, 0], s.gt_depth[0], crop=crop))
    return mean_metrics(per_image)


# ---------------------------------------------------------------------------
# interpolation-gap study

@dataclass(frozen=True)
class GradientBand:
    mean_gradient: float
    pixel_count: int
    abs_rel: float


@dataclass(frozen=True)
class InterpGapReport:
    """abs_rel by ground-truth gradient band for a native high-resolution
    prediction, its bilinear downsample scored at low resolution, and that
    downsample scored again after upsampling back to full resolution."""
    factor: int
    hr: tuple
    lr: tuple
    lr_up: tuple

    def lines(self) -> list:
        out = [f"gradient-band abs_rel, {self.factor}x down/up-sampled "
               "prediction vs native",
               f"{'band':>6}{'mean |grad|':>14}{'pixels':>10}"
               f"{'hr':>12}{'lr':>12}{'lr_up':>12}"]
        for i, (h, m, l) in enumerate(zip(self.hr, self.lr, self.lr_up)):
            out.append(f"{i:>6}{h.mean_gradient:>14.5f}{h.pixel_count:>10}"
                       f"{h.abs_rel:>12.6f}{m.abs_rel:>12.6f}"
                       f"{l.abs_rel:>12.6f}")
        return out


def _gradient_magnitude(gt: np.ndarray) -> np.ndarray:
    """Forward differences, zero at the trailing edge."""
    gx = np.zeros_like(gt)
    gy = np.zeros_like(gt)
    gx[:, :-1] = gt[:, 1:] - gt[:, :-1]
    gy[:-1, :] = gt[1:, :] - gt[:-1, :]
    return np.hypot(gx, gy)


def gradient_bands(gt: np.ndarray, pred: np.ndarray,
                   n_bands: int = 4) -> tuple:
    """Bands split at quantile edges of |ground-truth depth gradient|.

    Gradient ties collapse downward, so a piecewise-constant scene puts
    every flat pixel in the lowest band and only true depth edges in the
    top one; a band left empty by the collapse reports zeros.
    """
    if gt.shape != pred.shape or gt.ndim != 2:
        raise ContractViolation("gradient_bands expects matching 2-d maps")
    if np.any(gt <= 0):
        raise ContractViolation("gradient banding needs positive depth")
    g = _gradient_magnitude(gt).ravel()
    err = (np.abs(pred - gt) / gt).ravel()
    edges = np.quantile(g, np.linspace(0.0, 1.0, n_bands + 1)[1:-1])
    membership = np.digitize(g, edges, right=True)
    bands = []
    for k in range(n_bands):
        mask = membership == k
        if not mask.any():
            bands.append(GradientBand(0.0, 0, 0.0))
            continue
        bands.append(GradientBand(
            mean_gradient=float(g[mask].mean()),
            pixel_count=int(np.count_nonzero(mask)),
            abs_rel=float(err[mask].mean())))
    return tuple(bands)


def interp_gap_analysis(pred_hr: np.ndarray, gt_hr: np.ndarray,
                        factor: int = 4) -> InterpGapReport:
    """Where does resolution loss hurt?  The prediction is bilinearly
    downsampled by `factor`, scored at its own scale against downsampled
    ground truth, then upsampled back and scored against the full-resolution
    ground truth, all stratified by |gradient| of the truth."""
    if pred_hr.shape != gt_hr.shape:
        raise ContractViolation("prediction and ground truth must match")
    h, w = gt_hr.shape
    if factor < 2 or h % factor or w % factor:
        raise ContractViolation(
            f"map {h}x{w} is not divisible by factor {factor}")
    pred_lr = resize_array(pred_hr, h // factor, w // factor)
    gt_lr = resize_array(gt_hr, h // factor, w // factor)
    pred_up = resize_array(pred_lr, h, w)
    return InterpGapReport(factor=factor,
                           hr=gradient_bands(gt_hr, pred_hr),
                           lr=gradient_bands(gt_lr, pred_lr),
                           lr_up=gradient_bands(gt_hr, pred_up))


# ---------------------------------------------------------------------------
# image output

def save_gray16(path, arr: np.ndarray, scale: float | None = None) -> float:
    """16-bit grayscale PNG; returns the value->integer scale used."""
    from PIL import Image
    if arr.ndim != 2 or arr.size == 0:
        raise ContractViolation("save_gray16 expects a 2-d map")
    if not np.all(np.isfinite(arr)) or arr.min() < 0:
        raise ContractViolation("image payload must be finite and nonnegative")
    if scale is None:
        top = float(arr.max())
        scale = 65535.0 / top if top > 0 else 1.0
    data = np.clip(np.round(arr * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(data).save(path)
    return scale


def save_error_image(path, gt: np.ndarray, pred: np.ndarray) -> None:
    """8-bit relative-error visualization, normalized to the worst pixel."""
    from PIL import Image
    err = np.abs(pred - gt) / np.maximum(gt, 1e-9)
    top = err.max()
    data = np.zeros_like(err) if top == 0 else err / top
    Image.fromarray((data * 255).round().astype(np.uint8), mode="L").save(path)
