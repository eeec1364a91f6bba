"""Command-line front end.

One verb per job: train, distill, infer, audit-params, analyze-interp,
eval, gradcheck.  Every verb accepts the same base flags; a key=value
config file may supply any of them, with explicit flags taking precedence.
Verbs that produce files write a manifest of the resolved settings into
the output directory, and the manifest itself is a valid config file, so
any run can be repeated from its manifest alone.

Exit codes: 0 success, 1 runtime failure (one-line cause on stderr),
2 usage or config error.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .arch import DepthNet, PoseNet, audit_params, preset
from .data import load_image, render_frame, scene_samples, two_plane_scene
from .evaluation import (STANDARD_EVAL_CROP, evaluate_depth_net,
                         interp_gap_analysis, metrics_table, save_error_image,
                         save_gray16, write_metrics)
from .geometry import DepthRange, disp_to_depth_array
from .gradsuite import CHECKS, run_suite, suite_lines
from .losses import DistillConfig, LossConfig
from .ops import resize_array
from .tensor import ContractViolation, Tensor, write_tensor_records
from .training import (TrainConfig, TrainingAborted, load_checkpoint,
                       train_distill, train_selfsup)

ARCH_NAMES = ("hr-depth-res18", "hr-depth-lite", "baseline-unet")
FUSION_NAMES = ("conv3x3", "fse", "se")
GRAD_TOL = 1e-5


class UsageError(Exception):
    """Bad flags or config content; maps to exit code 2."""


# configuration -----------------------------------------------------------------

def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1"):
        return True
    if lowered in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (converter, allowed values or None); resolution and out stay strings
_CONFIG_KEYS = {
    "arch": (str, ARCH_NAMES),
    "fusion": (str, FUSION_NAMES),
    "norm": (str, ("l1", "l2")),
    "resolution": (str, None),
    "out": (str, None),
    "checkpoint": (str, None),
    "image": (str, None),
    "teacher": (str, None),
    "resume": (str, None),
    "seed": (int, None),
    "scales": (int, None),
    "epochs": (int, None),
    "batch_size": (int, None),
    "decay_epoch": (int, None),
    "frames": (int, None),
    "factor": (int, None),
    "seeds": (int, None),
    "lr": (float, None),
    "automask": (_bool, None),
    "crop": (_bool, None),
}
# manifest bookkeeping; accepted so a manifest can be replayed as a config
_INERT_KEYS = {"verb", "version", "depth_scale", "total"}


def read_config(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    values = {}
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}")
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _INERT_KEYS:
            continue
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{ln}: unknown key {key!r}")
        convert, allowed = _CONFIG_KEYS[key]
        try:
            values[key] = convert(value)
        except ValueError:
            raise UsageError(f"{path}:{ln}: bad value for {key}: {value!r}")
        if allowed is not None and values[key] not in allowed:
            raise UsageError(
                f"{path}:{ln}: {key} must be one of {', '.join(allowed)}")
    return values


def _resolution(text: str):
    parts = text.lower().split("x")
    try:
        w, h = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"resolution must look like 320x96, got {text!r}")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


# parser ------------------------------------------------------------------------

def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value settings; explicit flags win")
    common.add_argument("--seed", type=int, default=0,
                        help="master seed (default 0)")
    common.add_argument("--out", metavar="DIR",
                        help="output directory for manifest and artifacts")
    common.add_argument("--resolution", type=_resolution, default="320x96",
                        metavar="WxH",
                        help="working image size (default 320x96)")
    common.add_argument("--arch", choices=ARCH_NAMES, default=ARCH_NAMES[0],
                        help="depth network architecture")
    common.add_argument("--fusion", choices=FUSION_NAMES, default=None,
                        help="skip-fusion block (default: architecture's own)")
    common.add_argument("--automask", action="store_true",
                        help="mask pixels a static camera already explains")
    common.add_argument("--scales", type=int, default=None, metavar="N",
                        help="disparity scales, 1..4 (default: arch's own)")

    def training_flags(p):
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch-size", type=int, default=1)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--decay-epoch", type=int, default=15,
                       help="epoch from which lr is divided by 10")
        p.add_argument("--frames", type=int, default=6,
                       help="synthetic sequence length")
        p.add_argument("--resume", metavar="CHECKPOINT",
                       help="continue from a saved checkpoint")

    parser = argparse.ArgumentParser(
        prog="hrdepth",
        description="Self-supervised monocular depth estimation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", metavar="verb", required=True)
    verbs = {}

    p = verbs["train"] = sub.add_parser(
        "train", parents=[common],
        help="self-supervised training on the synthetic two-plane scene")
    training_flags(p)

    p = verbs["distill"] = sub.add_parser(
        "distill", parents=[common],
        help="train a student (--arch) against a frozen teacher checkpoint")
    training_flags(p)
    p.add_argument("--teacher", metavar="CHECKPOINT",
                   help="checkpoint providing the frozen teacher")
    p.add_argument("--norm", choices=("l1", "l2"), default="l1",
                   help="distillation penalty")

    p = verbs["infer"] = sub.add_parser(
        "infer", parents=[common],
        help="predict depth for one image; writes 16-bit PNG + raw payload")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--image", metavar="FILE")

    p = verbs["eval"] = sub.add_parser(
        "eval", parents=[common],
        help="standard depth metrics on the synthetic scene's ground truth")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--crop", action="store_true",
                   help="score only the conventional central window")

    verbs["audit-params"] = sub.add_parser(
        "audit-params", parents=[common],
        help="closed-form parameter count per decoder node")

    p = verbs["analyze-interp"] = sub.add_parser(
        "analyze-interp", parents=[common],
        help="gradient-band study of bilinear down/up-sampling error")
    p.add_argument("--factor", type=int, default=4,
                   help="down/up-sampling factor (default 4)")
    p.add_argument("--checkpoint", metavar="FILE",
                   help="band a trained model's prediction instead of the "
                        "noisy ground-truth proxy")

    p = verbs["gradcheck"] = sub.add_parser(
        "gradcheck", parents=[common],
        help="finite-difference validation of every op and loss")
    p.add_argument("names", nargs="*", metavar="CHECK",
                   help="individual checks to run")
    p.add_argument("--all", action="store_true", help="run the whole suite")
    p.add_argument("--seeds", type=int, default=10,
                   help="random draws per check (default 10)")

    return parser, verbs


def _dests(subparser) -> set:
    return {a.dest for a in subparser._actions}


# shared helpers ----------------------------------------------------------------

def _need(args, field: str):
    value = getattr(args, field)
    if value is None:
        raise UsageError(f"--{field.replace('_', '-')} is required")
    return value


def _out_dir(args) -> Path:
    out = Path(_need(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sized(args):
    w, h = args.resolution
    if w % 32 or h % 32:
        raise UsageError(f"resolution {w}x{h} must be divisible by 32")
    return w, h


def _arch_config(args):
    cfg = preset(args.arch, args.fusion)
    if args.scales is not None:
        cfg = replace(cfg, scales=args.scales)
    return cfg


def _checkpoint_meta(cfg, automask: bool, rng: DepthRange) -> dict:
    """Numeric self-description so infer/eval can rebuild the network."""
    return {"arch": ARCH_NAMES.index(cfg.name),
            "fusion": FUSION_NAMES.index(cfg.fusion),
            "scales": cfg.scales,
            "automask": int(automask),
            "depth_min": rng.min_depth,
            "depth_max": rng.max_depth}


def _net_from_checkpoint(path, args):
    """Rebuild the depth network a checkpoint describes and load it."""
    meta = load_checkpoint(path, {})
    if "arch" in meta:
        cfg = preset(ARCH_NAMES[int(meta["arch"])],
                     FUSION_NAMES[int(meta["fusion"])])
        cfg = replace(cfg, scales=int(meta["scales"]))
    else:
        cfg = _arch_config(args)
    net = DepthNet(cfg, seed=args.seed)
    load_checkpoint(path, {"depth": net})
    rng = DepthRange(meta.get("depth_min", 0.1), meta.get("depth_max", 100.0))
    return net, rng, cfg


def _write_manifest(out: Path, verb: str, args, cfg=None, **extra) -> None:
    w, h = args.resolution
    resolved = {"verb": verb, "version": __version__, "seed": args.seed,
                "resolution": f"{w}x{h}"}
    if cfg is not None:
        resolved.update(arch=cfg.name, fusion=cfg.fusion, scales=cfg.scales)
    for field in ("automask", "crop", "epochs", "batch_size", "lr",
                  "decay_epoch", "frames", "norm", "factor", "seeds",
                  "checkpoint", "image", "teacher", "resume"):
        value = getattr(args, field, None)
        if value is not None:
            resolved[field] = value
    resolved.update(extra)
    lines = []
    for key, value in resolved.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n",
                                      encoding="ascii")


def _scene_setup(args, frames: int):
    w, h = _sized(args)
    spec = two_plane_scene(w, h, frames=frames)
    samples = scene_samples(spec)
    if not samples:
        raise UsageError("need at least 3 frames")
    return spec, samples


def _train_config(args, scales: int) -> TrainConfig:
    if args.batch_size < 1:
        raise UsageError("batch size must be positive")
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, decay_epoch=args.decay_epoch,
                       seed=args.seed,
                       loss=LossConfig(num_scales=scales,
                                       automask=args.automask))


# verbs ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    out = _out_dir(args)
    _, samples = _scene_setup(args, args.frames)
    if len(samples) < args.batch_size:
        raise UsageError(f"batch size {args.batch_size} exceeds "
                         f"{len(samples)} samples")
    cfg = _arch_config(args)
    depth_net = DepthNet(cfg, seed=args.seed)
    pose_net = PoseNet(seed=args.seed + 1)
    train_cfg = _train_config(args, cfg.scales)
    _write_manifest(out, "train", args, cfg)
    result = train_selfsup(
        depth_net, pose_net, samples, train_cfg, out,
        resume_from=args.resume,
        extra_meta=_checkpoint_meta(cfg, args.automask,
                                    train_cfg.depth_range))
    print(result.log_lines[-1])
    print(f"checkpoint {result.checkpoints[-1]}")
    return 0


def _cmd_distill(args) -> int:
    out = _out_dir(args)
    teacher_path = _need(args, "teacher")
    _, samples = _scene_setup(args, args.frames)
    teacher, rng, _ = _net_from_checkpoint(teacher_path, args)
    cfg = _arch_config(args)
    student = DepthNet(cfg, seed=args.seed)
    train_cfg = _train_config(args, cfg.scales)
    train_cfg = replace(train_cfg, depth_range=rng)
    _write_manifest(out, "distill", args, cfg)
    result = train_distill(
        teacher, student, samples, train_cfg, out,
        distill_cfg=DistillConfig(args.norm), resume_from=args.resume,
        extra_meta=_checkpoint_meta(cfg, args.automask, rng))
    print(result.log_lines[-1])
    print(f"checkpoint {result.checkpoints[-1]}")
    return 0


def _cmd_infer(args) -> int:
    out = _out_dir(args)
    path = _need(args, "checkpoint")
    image_path = _need(args, "image")
    w, h = _sized(args)
    net, rng, cfg = _net_from_checkpoint(path, args)
    image = load_image(image_path, w, h)
    disp = net(Tensor(image[None]), training=False)[0]
    depth = disp_to_depth_array(disp.data[0, 0], rng)
    scale = save_gray16(out / "depth.png", depth)
    write_tensor_records(out / "depth.bin", {"depth": depth})
    _write_manifest(out, "infer", args, cfg, depth_scale=scale)
    print(f"wrote {out / 'depth.png'} and {out / 'depth.bin'} "
          f"(value-to-integer scale {scale!r})")
    return 0


def _cmd_eval(args) -> int:
    path = _need(args, "checkpoint")
    _, samples = _scene_setup(args, args.frames)
    net, rng, cfg = _net_from_checkpoint(path, args)
    metrics = evaluate_depth_net(
        net, samples, rng, crop=STANDARD_EVAL_CROP if args.crop else None)
    w, h = args.resolution
    for line in metrics_table([(cfg.name, f"{w}x{h}", metrics)]):
        print(line)
    if args.out:
        out = _out_dir(args)
        write_metrics(out / "metrics.txt", metrics)
        _write_manifest(out, "eval", args, cfg)
    return 0


def _cmd_audit(args) -> int:
    report = audit_params(_arch_config(args))
    for line in report.lines():
        print(line)
    if args.out:
        out = _out_dir(args)
        (out / "audit.txt").write_text("\n".join(report.lines()) + "\n",
                                       encoding="ascii")
        (out / "audit_kv.txt").write_text("\n".join(report.kv_lines()) + "\n",
                                          encoding="ascii")
        _write_manifest(out, "audit-params", args, _arch_config(args),
                        total=report.total)
    return 0


def _cmd_interp(args) -> int:
    w, h = _sized(args)
    spec = two_plane_scene(w, h, frames=3)
    image, gt = render_frame(spec, 1)
    gt = gt[0]
    if args.checkpoint:
        net, rng, _ = _net_from_checkpoint(args.checkpoint, args)
        disp = net(Tensor(image[None]), training=False)[0]
        pred = disp_to_depth_array(disp.data[0, 0], rng)
        pred = pred * (np.median(gt) / np.median(pred))
    else:
        # stand-in prediction: truth plus 0.5% noise, so banding isolates
        # what resampling alone does
        noise = np.random.default_rng(args.seed).standard_normal(gt.shape)
        pred = gt * (1.0 + 0.005 * noise)
    report = interp_gap_analysis(pred, gt, factor=args.factor)
    for line in report.lines():
        print(line)
    if args.out:
        out = _out_dir(args)
        (out / "interp.txt").write_text("\n".join(report.lines()) + "\n",
                                        encoding="ascii")
        rows = [f"factor={report.factor}"]
        for i, (b_hr, b_lr, b_up) in enumerate(zip(report.hr, report.lr,
                                                   report.lr_up)):
            rows.append(f"band{i}_gradient={b_hr.mean_gradient!r}")
            rows.append(f"band{i}_pixels={b_hr.pixel_count}")
            rows.append(f"band{i}_hr={b_hr.abs_rel!r}")
            rows.append(f"band{i}_lr={b_lr.abs_rel!r}")
            rows.append(f"band{i}_lr_up={b_up.abs_rel!r}")
        (out / "interp_bands.txt").write_text("\n".join(rows) + "\n",
                                              encoding="ascii")
        lr = resize_array(pred, h // args.factor, w // args.factor)
        save_error_image(out / "error_hr.png", gt, pred)
        save_error_image(out / "error_lr_up.png", gt,
                         resize_array(lr, h, w))
        _write_manifest(out, "analyze-interp", args)
    return 0


def _cmd_gradcheck(args) -> int:
    if args.all:
        names = None
    elif args.names:
        unknown = [n for n in args.names if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown checks: {', '.join(unknown)}")
        names = args.names
    else:
        raise UsageError("pass --all or at least one check name")
    results = run_suite(names, seeds=args.seeds)
    lines = suite_lines(results, tol=GRAD_TOL)
    for line in lines:
        print(line)
    if args.out:
        out = _out_dir(args)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n",
                                           encoding="ascii")
        _write_manifest(out, "gradcheck", args)
    return 0 if all(r.ok(GRAD_TOL) for r in results) else 1


_HANDLERS = {
    "train": _cmd_train,
    "distill": _cmd_distill,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "audit-params": _cmd_audit,
    "analyze-interp": _cmd_interp,
    "gradcheck": _cmd_gradcheck,
}


def run_cli(argv=None) -> int:
    parser, verbs = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            overrides = read_config(args.config)
            sub = verbs[args.verb]
            known = _dests(sub)
            sub.set_defaults(**{k: v for k, v in overrides.items()
                                if k in known})
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        return _HANDLERS[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
