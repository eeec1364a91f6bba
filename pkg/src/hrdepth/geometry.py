"""Pinhole camera geometry: disparity to depth, pose composition, and the
differentiable backproject-transform-reproject warp used for view synthesis.

Pixel coordinates index pixel centers, (0, 0) at the top left.  Normalized
grid coordinates follow the sampler in ops: -1 and +1 are the centers of the
border pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .ops import grid_sample_bilinear
from .tensor import ContractViolation, Tensor


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise ContractViolation("image must be at least 2x2")

    @staticmethod
    def centered(width: int, height: int, fx: float, fy: float) -> "CameraIntrinsics":
        """Principal point at the image center."""
        return CameraIntrinsics(fx=fx, fy=fy, cx=(width - 1) / 2.0,
                                cy=(height - 1) / 2.0, width=width, height=height)


@dataclass(frozen=True)
class DepthRange:
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        if not (0 < self.min_depth < self.max_depth):
            raise ContractViolation("need 0 < min_depth < max_depth")

    @property
    def slope(self) -> float:
        return 1.0 / self.min_depth - 1.0 / self.max_depth

    @property
    def offset(self) -> float:
        return 1.0 / self.max_depth


@dataclass(frozen=True)
class PoseVec:
    """Six scalars: translation (tx, ty, tz) then Euler angles (rx, ry, rz)."""
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_tensor(self, batch: int = 1) -> Tensor:
        row = np.array(self.t + self.euler, dtype=np.float64)
        return Tensor(np.tile(row, (batch, 1)))


def write_intrinsics(path, cam: CameraIntrinsics, rng: DepthRange,
                     baseline: float) -> None:
    """Four text lines: fx fy cx cy / width height / min max depth / baseline."""
    with open(path, "w") as f:
        f.write(f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}\n")
        f.write(f"{cam.width} {cam.height}\n")
        f.write(f"{rng.min_depth!r} {rng.max_depth!r}\n")
        f.write(f"{baseline!r}\n")


def read_intrinsics(path):
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if len(lines) != 4:
        raise ContractViolation(f"intrinsics file must have 4 lines, got {len(lines)}")
    try:
        fx, fy, cx, cy = (float(v) for v in lines[0].split())
        width, height = (int(v) for v in lines[1].split())
        dmin, dmax = (float(v) for v in lines[2].split())
        baseline = float(lines[3])
    except ValueError as e:
        raise ContractViolation(f"malformed intrinsics file: {e}") from e
    return (CameraIntrinsics(fx, fy, cx, cy, width, height),
            DepthRange(dmin, dmax), baseline)


# ---------------------------------------------------------------------------
# disparity <-> depth

def disp_to_depth(disp: Tensor, rng: DepthRange) -> Tensor:
    """Map sigmoid disparity in (0, 1) to metric depth.

    depth = 1 / (a * disp + b) with a = 1/min - 1/max and b = 1/max, so
    disparity 0 and 1 hit max_depth and min_depth exactly.
    """
    return tt.reciprocal(tt.add_scalar(tt.mul_scalar(disp, rng.slope),
                                       rng.offset))


def disp_to_depth_array(disp: np.ndarray, rng: DepthRange) -> np.ndarray:
    return 1.0 / (rng.slope * disp + rng.offset)


def depth_to_disp_array(depth: np.ndarray, rng: DepthRange) -> np.ndarray:
    """Inverse of disp_to_depth for building reference disparities."""
    return (1.0 / depth - rng.offset) / rng.slope


# ---------------------------------------------------------------------------
# pose

def _rotation_from_euler(euler: Tensor) -> Tensor:
    """(b, 3) Euler angles -> (b, 3, 3) rotation, composed as Rz @ Ry @ Rx."""
    b = euler.data.shape[0]
    one = Tensor(np.ones(b))
    zero = Tensor(np.zeros(b))

    def angle(i):
        return tt.reshape(tt.slice_axis(euler, 1, i, i + 1), (b,))

    def as_matrix(entries):
        return tt.reshape(tt.stack(entries, axis=1), (b, 3, 3))

    sx, cx = tt.sin(angle(0)), tt.cos(angle(0))
    sy, cy = tt.sin(angle(1)), tt.cos(angle(1))
    sz, cz = tt.sin(angle(2)), tt.cos(angle(2))
    rx = as_matrix([one, zero, zero,
                    zero, cx, tt.neg(sx),
                    zero, sx, cx])
    ry = as_matrix([cy, zero, sy,
                    zero, one, zero,
                    tt.neg(sy), zero, cy])
    rz = as_matrix([cz, tt.neg(sz), zero,
                    sz, cz, zero,
                    zero, zero, one])
    return tt.matmul(rz, tt.matmul(ry, rx))


def pose_to_matrix(pose_vec: Tensor, invert: bool = False) -> Tensor:
    """(b, 6) translation-then-Euler vector -> (b, 4, 4) rigid transform.

    With invert the rotation transposes and the translation flips into the
    rotated frame: [R^T | -R^T t].
    """
    if pose_vec.data.ndim != 2 or pose_vec.data.shape[1] != 6:
        raise ContractViolation("pose_to_matrix expects a (b, 6) tensor")
    b = pose_vec.data.shape[0]
    t = tt.reshape(tt.slice_axis(pose_vec, 1, 0, 3), (b, 3, 1))
    rot = _rotation_from_euler(tt.slice_axis(pose_vec, 1, 3, 6))
    if invert:
        rot = tt.transpose_last2(rot)
        t = tt.neg(tt.matmul(rot, t))
    top = tt.concat([rot, t], axis=2)
    bottom = Tensor(np.tile(np.array([[[0.0, 0.0, 0.0, 1.0]]]), (b, 1, 1)))
    return tt.concat([top, bottom], axis=1)


def stereo_transform(baseline: float, batch: int = 1) -> Tensor:
    """Pure horizontal translation: R = I, t = (-baseline, 0, 0)."""
    m = np.eye(4)
    m[0, 3] = -baseline
    return Tensor(np.tile(m[None], (batch, 1, 1)))


# ---------------------------------------------------------------------------
# warping

_Z_EPS = 1e-6


def warp_grid(depth: Tensor, cam: CameraIntrinsics, transform: Tensor):
    """Backproject depth, apply the rigid transform, reproject and normalize.

    Returns (grid, valid): grid is a (b, 2, h, w) tensor of normalized sample
    coordinates, differentiable in depth and transform; valid is a boolean
    (b, 1, h, w) array, False where the point left the view frustum or ended
    behind the camera.  Behind-camera points are pinned outside [-1, 1] so a
    border-clamping sampler reads border pixels there.
    """
    if depth.data.ndim != 4 or depth.data.shape[1] != 1:
        raise ContractViolation("warp_grid expects depth of shape (b, 1, h, w)")
    if np.any(depth.data <= 0):
        raise ContractViolation("depth must be strictly positive")
    b, _, h, w = depth.data.shape
    if (h, w) != (cam.height, cam.width):
        raise ContractViolation(
            f"depth {h}x{w} does not match intrinsics {cam.height}x{cam.width}")
    n = h * w

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    ray_x = Tensor(np.broadcast_to(((uu - cam.cx) / cam.fx)[None, None],
                                   depth.data.shape).copy())
    ray_y = Tensor(np.broadcast_to(((vv - cam.cy) / cam.fy)[None, None],
                                   depth.data.shape).copy())

    px = tt.reshape(tt.mul(depth, ray_x), (b, 1, n))
    py = tt.reshape(tt.mul(depth, ray_y), (b, 1, n))
    pz = tt.reshape(depth, (b, 1, n))
    ones = Tensor(np.ones((b, 1, n)))
    points = tt.concat([px, py, pz, ones], axis=1)

    moved = tt.matmul(transform, points)
    qx = tt.slice_axis(moved, 1, 0, 1)
    qy = tt.slice_axis(moved, 1, 1, 2)
    qz = tt.slice_axis(moved, 1, 2, 3)

    front = qz.data > _Z_EPS
    z_safe = tt.maximum(qz, Tensor(np.full((b, 1, n), _Z_EPS)))
    u = tt.add_scalar(tt.mul_scalar(tt.div(qx, z_safe), cam.fx), cam.cx)
    v = tt.add_scalar(tt.mul_scalar(tt.div(qy, z_safe), cam.fy), cam.cy)
    un = tt.add_scalar(tt.mul_scalar(u, 2.0 / (w - 1)), -1.0)
    vn = tt.add_scalar(tt.mul_scalar(v, 2.0 / (h - 1)), -1.0)

    # pin behind-camera points outside the sampling range, keeping the tape
    # clean: grad flows only through the in-front region
    keep = Tensor(front.astype(np.float64))
    off = Tensor(np.where(front, 0.0, -2.0))
    un = tt.add(tt.mul(un, keep), off)
    vn = tt.add(tt.mul(vn, keep), off)

    grid = tt.reshape(tt.concat([un, vn], axis=1), (b, 2, h, w))
    # tolerate rounding dust at the border, same scale the sampler snaps at
    tol = 1.0 + 1e-9
    in_view = (np.abs(un.data) <= tol) & (np.abs(vn.data) <= tol) & front
    valid = in_view.reshape(b, 1, h, w)
    return grid, valid


def synthesize_view(source: Tensor, grid: Tensor) -> Tensor:
    """Resample the source image at warped coordinates (border clamped)."""
    return grid_sample_bilinear(source, grid, border_clamp=True)
