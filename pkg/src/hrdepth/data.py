"""Data sources: an analytic multi-plane scene renderer for functional
tests, a directory-layout loader for real driving captures, and a
deterministic batching helper.

The synthetic scene is a set of fronto-parallel textured planes observed by
a translating pinhole camera.  Because every pixel's depth and every
frame-to-frame transform is known in closed form, rendered sequences give
ground truth for warping, training and evaluation without any learned
component in the loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, stereo_transform
from .tensor import ContractViolation, Tensor

# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Plane:
    """Fronto-parallel plane z = depth carrying a sinusoid texture.

    extent is (half_width, half_height) in world units around the z axis;
    None makes the plane infinite.  Texture values stay in (0, 1) provided
    base +- amp does.
    """
    depth: float
    freq: tuple = (0.35, 0.27)       # cycles per world unit, x and y
    phase: tuple = (0.0, 0.0)
    base: float = 0.5
    amp: float = 0.45
    extent: tuple | None = None

    def __post_init__(self):
        if self.depth <= 0:
            raise ContractViolation("plane depth must be positive")
        if not (0 < self.base - self.amp and self.base + self.amp < 1):
            raise ContractViolation("texture range must stay inside (0, 1)")

    def texture(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """(3, ...) channel values at world coordinates."""
        fx, fy = self.freq
        px, py = self.phase
        chans = []
        for c in range(3):
            chans.append(self.base + self.amp
                         * np.sin(2 * np.pi * fx * x + px + 0.9 * c)
                         * np.cos(2 * np.pi * fy * y + py + 0.6 * c))
        return np.stack(chans)


@dataclass(frozen=True)
class SceneSpec:
    """Scene plus the camera trajectory (lateral translation per frame)."""
    width: int = 320
    height: int = 96
    fx_rel: float = 0.58             # focal length as a fraction of width
    fy_rel: float = 1.92             # ... and of height
    cx_rel: float = 0.5
    cy_rel: float = 0.5
    frames: int = 12
    step: float = 0.08               # camera translation along +x per frame
    planes: tuple = ()

    def __post_init__(self):
        if self.width < 2 or self.height < 2 or self.frames < 1:
            raise ContractViolation("degenerate scene dimensions")
        if not self.planes:
            raise ContractViolation("a scene needs at least one plane")
        depths = [p.depth for p in self.planes]
        if sorted(depths) != depths:
            raise ContractViolation("planes must be sorted near to far")
        if self.planes[-1].extent is not None:
            raise ContractViolation("the farthest plane must be infinite so "
                                    "every ray hits something")

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx_rel * self.width, fy=self.fy_rel * self.height,
            cx=self.cx_rel * (self.width - 1),
            cy=self.cy_rel * (self.height - 1),
            width=self.width, height=self.height)

    def translation(self, frame: int) -> np.ndarray:
        return np.array([frame * self.step, 0.0, 0.0])


def two_plane_scene(width=320, height=96, frames=12, step=0.08,
                    near=5.0, far=50.0) -> SceneSpec:
    """A near textured rectangle over an infinite far backdrop."""
    # the near rectangle fills ~90% of the frame at its depth
    near_plane = Plane(depth=near, freq=(0.35, 0.27), phase=(0.3, 1.1),
                       extent=(0.9 * near / (2 * 0.58),
                               0.9 * near / (2 * 1.92)))
    far_plane = Plane(depth=far, freq=(0.05, 0.04), phase=(2.0, 0.7))
    return SceneSpec(width=width, height=height, frames=frames, step=step,
                     planes=(near_plane, far_plane))


def render_frame(spec: SceneSpec, frame: int, scale: int = 1):
    """Render one frame; returns (image (3, h, w), depth (1, h, w)).

    scale > 1 renders the same field of view at a multiplied resolution
    (focal lengths scale with it), for resolution-gap studies.
    """
    w, h = spec.width * scale, spec.height * scale
    cam = spec.camera()
    fx, fy = cam.fx * scale, cam.fy * scale
    cx = spec.cx_rel * (w - 1)
    cy = spec.cy_rel * (h - 1)
    t = spec.translation(frame)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    dx = (u - cx) / fx
    dy = (v - cy) / fy

    image = np.zeros((3, h, w))
    depth = np.zeros((1, h, w))
    unset = np.ones((h, w), dtype=bool)
    for plane in spec.planes:
        z_cam = plane.depth - t[2]
        if z_cam <= 0:
            raise ContractViolation("camera is at or beyond a plane")
        x_w = t[0] + z_cam * dx
        y_w = t[1] + z_cam * dy
        hit = unset.copy()
        if plane.extent is not None:
            hx, hy = plane.extent
            hit &= (np.abs(x_w) <= hx) & (np.abs(y_w) <= hy)
        tex = plane.texture(x_w, y_w)
        image[:, hit] = tex[:, hit]
        depth[0, hit] = z_cam
        unset &= ~hit
    # the final plane is infinite, so nothing can remain unset
    assert not unset.any()
    return image, depth


def relative_transform(spec: SceneSpec, target: int, source: int) -> np.ndarray:
    """(4, 4) mapping target-camera points into the source camera."""
    delta = spec.translation(target) - spec.translation(source)
    out = np.eye(4)
    out[:3, 3] = delta
    return out


@dataclass
class Sample:
    """One training example: a target frame with neighboring source views.

    transforms holds a (4, 4) array per source when the relative motion is
    known (synthetic scenes, stereo pairs) and None when a pose network must
    supply it.  gt_depth is None for real captures.
    """
    target: np.ndarray
    sources: list
    transforms: list
    cam: CameraIntrinsics
    gt_depth: np.ndarray | None = None


def make_sample(spec: SceneSpec, frame: int, neighbors=(-1, 1)) -> Sample:
    if not all(0 <= frame + n < spec.frames for n in neighbors):
        raise ContractViolation(f"frame {frame} lacks neighbors {neighbors}")
    target, depth = render_frame(spec, frame)
    sources, transforms = [], []
    for n in neighbors:
        src, _ = render_frame(spec, frame + n)
        sources.append(src)
        transforms.append(relative_transform(spec, frame, frame + n))
    return Sample(target=target, sources=sources, transforms=transforms,
                  cam=spec.camera(), gt_depth=depth)


def scene_samples(spec: SceneSpec, neighbors=(-1, 1)) -> list:
    lo = -min(0, min(neighbors))
    hi = spec.frames - max(0, max(neighbors))
    return [make_sample(spec, i, neighbors) for i in range(lo, hi)]


# scene-spec files: flat key=value lines ------------------------------------

def write_scene_spec(path, spec: SceneSpec) -> None:
    lines = []
    for key in ("width", "height", "fx_rel", "fy_rel", "cx_rel", "cy_rel",
                "frames", "step"):
        lines.append(f"{key}={getattr(spec, key)!r}")
    for i, p in enumerate(spec.planes):
        lines.append(f"plane.{i}.depth={p.depth!r}")
        lines.append(f"plane.{i}.freq={p.freq[0]!r},{p.freq[1]!r}")
        lines.append(f"plane.{i}.phase={p.phase[0]!r},{p.phase[1]!r}")
        lines.append(f"plane.{i}.base={p.base!r}")
        lines.append(f"plane.{i}.amp={p.amp!r}")
        ext = "inf" if p.extent is None else f"{p.extent[0]!r},{p.extent[1]!r}"
        lines.append(f"plane.{i}.extent={ext}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scene_spec(path) -> SceneSpec:
    kv = {}
    with open(path, encoding="ascii") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{ln}: expected key=value")
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    try:
        planes = []
        for i in range(sum(1 for k in kv if k.endswith(".depth"))):
            pre = f"plane.{i}."
            ext_s = kv[pre + "extent"]
            extent = None if ext_s == "inf" else \
                tuple(float(v) for v in ext_s.split(","))
            planes.append(Plane(
                depth=float(kv[pre + "depth"]),
                freq=tuple(float(v) for v in kv[pre + "freq"].split(",")),
                phase=tuple(float(v) for v in kv[pre + "phase"].split(",")),
                base=float(kv[pre + "base"]), amp=float(kv[pre + "amp"]),
                extent=extent))
        return SceneSpec(
            width=int(kv["width"]), height=int(kv["height"]),
            fx_rel=float(kv["fx_rel"]), fy_rel=float(kv["fy_rel"]),
            cx_rel=float(kv["cx_rel"]), cy_rel=float(kv["cy_rel"]),
            frames=int(kv["frames"]), step=float(kv["step"]),
            planes=tuple(planes))
    except (KeyError, ValueError) as exc:
        raise ContractViolation(f"malformed scene spec {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# driving-capture layout: <root>/<drive>/image_02|image_03/data/<frame>.png

_SIDE_DIR = {"l": "image_02", "r": "image_03"}
_OTHER_SIDE = {"l": "r", "r": "l"}


@dataclass(frozen=True)
class LoaderConfig:
    width: int = 320
    height: int = 96
    fx_rel: float = 0.58
    fy_rel: float = 1.92
    cx_rel: float = 0.5
    cy_rel: float = 0.5
    baseline: float = 0.54
    use_stereo: bool = False
    neighbors: tuple = (-1, 1)

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx_rel * self.width, fy=self.fy_rel * self.height,
            cx=self.cx_rel * (self.width - 1),
            cy=self.cy_rel * (self.height - 1),
            width=self.width, height=self.height)


def read_split_file(path) -> list:
    """Lines of "<drive> <frame> <side>"; blank lines are skipped."""
    out = []
    with open(path, encoding="ascii") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in _SIDE_DIR:
                raise ContractViolation(f"{path}:{ln}: expected "
                                        f"'<drive> <frame> <side l|r>'")
            out.append((parts[0], int(parts[1]), parts[2]))
    return out


def frame_path(root, drive, frame, side):
    from pathlib import Path
    return Path(root) / drive / _SIDE_DIR[side] / "data" / f"{frame:010d}.png"


def load_image(path, width, height) -> np.ndarray:
    """(3, h, w) float64 in [0, 1], bilinearly resized."""
    from PIL import Image
    with Image.open(path) as img:
        img = img.convert("RGB").resize((width, height), Image.BILINEAR)
        return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


class DriveDataset:
    """Monocular (plus optional stereo) samples from a capture directory.

    Entries whose temporal neighbors are missing on disk are dropped with a
    warning rather than failing the whole run.
    """

    def __init__(self, root, entries, config: LoaderConfig | None = None):
        self.root = root
        self.config = config or LoaderConfig()
        self.entries = []
        for drive, frame, side in entries:
            needed = [frame_path(root, drive, frame, side)]
            needed += [frame_path(root, drive, frame + n, side)
                       for n in self.config.neighbors]
            if self.config.use_stereo:
                needed.append(frame_path(root, drive, frame,
                                         _OTHER_SIDE[side]))
            missing = [p for p in needed if not p.exists()]
            if missing:
                warnings.warn(f"skipping {drive} frame {frame}: "
                              f"missing {missing[0]}")
                continue
            self.entries.append((drive, frame, side))

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, idx) -> Sample:
        drive, frame, side = self.entries[idx]
        cfg = self.config
        w, h = cfg.width, cfg.height
        target = load_image(frame_path(self.root, drive, frame, side), w, h)
        sources, transforms = [], []
        for n in cfg.neighbors:
            sources.append(load_image(
                frame_path(self.root, drive, frame + n, side), w, h))
            transforms.append(None)
        if cfg.use_stereo:
            sources.append(load_image(
                frame_path(self.root, drive, frame, _OTHER_SIDE[side]), w, h))
            # right-of-target means the opposite sign when the target is 'r'
            sign = 1.0 if side == "l" else -1.0
            transforms.append(
                stereo_transform(sign * cfg.baseline, batch=1).data[0])
        return Sample(target=target, sources=sources, transforms=transforms,
                      cam=cfg.camera())


# ---------------------------------------------------------------------------
# batching

def epoch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled index batches for one epoch; the last partial batch is
    dropped.  The shuffle depends only on (seed, epoch)."""
    if batch_size < 1 or n < batch_size:
        raise ContractViolation("batch size must fit the dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    perm = rng.permutation(n)
    return [perm[i * batch_size:(i + 1) * batch_size]
            for i in range(n // batch_size)]


def collate(samples: list) -> Sample:
    """Stack compatible samples into one batched Sample."""
    first = samples[0]
    n_src = len(first.sources)
    if any(len(s.sources) != n_src for s in samples):
        raise ContractViolation("samples disagree on source count")
    target = np.stack([s.target for s in samples])
    sources = [np.stack([s.sources[i] for s in samples])
               for i in range(n_src)]
    transforms = []
    for i in range(n_src):
        if first.transforms[i] is None:
            transforms.append(None)
        else:
            transforms.append(np.stack([s.transforms[i] for s in samples]))
    gt = None
    if first.gt_depth is not None:
        gt = np.stack([s.gt_depth for s in samples])
    return Sample(target=target, sources=sources, transforms=transforms,
                  cam=first.cam, gt_depth=gt)
