"""Optimization: Adam, the joint depth+pose self-supervised loop, and
teacher-student distillation.

Runs are bitwise reproducible: batch order depends only on (seed, epoch),
parameters and optimizer slots live in float64, and log lines print floats
with repr.  Checkpoints carry parameters, batch-norm running statistics and
the full optimizer state, so a resumed run continues the exact trajectory
of an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import Sample, collate, epoch_indices
from .encoders import Module
from .geometry import DepthRange, pose_to_matrix
from .losses import DistillConfig, LossConfig, WarpBatch, distill_loss, total_loss
from .tensor import (ContractViolation, Tape, Tensor, read_tensor_records,
                     write_tensor_records)


class TrainingAborted(RuntimeError):
    """The loss went non-finite; the last good checkpoint is on disk."""


class Adam(object):
    """Adam with bias correction.  Updates happen in place; a step carrying
    any non-finite gradient is rejected outright."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (0 < lr and 0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
            raise ContractViolation("bad optimizer hyperparameters")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def step(self, grads: dict) -> bool:
        """grads maps param name -> ndarray; missing names are untouched.
        Returns False (and changes nothing) if any gradient is non-finite."""
        live = {k: g for k, g in grads.items() if g is not None}
        if any(not np.all(np.isfinite(g)) for g in live.values()):
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in live.items():
            p = self.params[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_arrays(self) -> dict:
        out = {"adam.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict) -> None:
        self.t = int(arrays["adam.t"][0])
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].reshape(self.m[k].shape)
            self.v[k] = arrays[f"adam.v.{k}"].reshape(self.v[k].shape)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-3
    decay_epoch: int = 15        # lr is divided by 10 from this epoch on
    seed: int = 0
    use_pose_net: bool = True    # ignore known motions, learn them instead
    loss: LossConfig = field(default_factory=LossConfig)
    depth_range: DepthRange = field(default_factory=DepthRange)

    def lr_at(self, epoch: int) -> float:
        return self.lr * (0.1 if epoch >= self.decay_epoch else 1.0)


@dataclass
class TrainResult:
    records: list = field(default_factory=list)   # per-step dicts
    log_lines: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    rejected_steps: int = 0

    @property
    def first_re(self) -> float:
        return self.records[0]["re"]

    def epoch_mean_re(self, epoch: int) -> float:
        vals = [r["re"] for r in self.records if r["epoch"] == epoch]
        return float(np.mean(vals))


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, nets: dict, adam: Adam | None = None,
                    meta: dict | None = None) -> None:
    """nets maps a prefix ("depth", "pose") to a Module."""
    records = {}
    for prefix, net in nets.items():
        for k, t in net.named_params().items():
            records[f"param.{prefix}.{k}"] = t.data
        for k, a in net.named_state().items():
            records[f"state.{prefix}.{k}"] = a
    if adam is not None:
        records.update(adam.state_arrays())
    for k, val in (meta or {}).items():
        records[f"meta.{k}"] = np.array([float(val)])
    write_tensor_records(path, records)


def load_checkpoint(path, nets: dict, adam: Adam | None = None) -> dict:
    """Restores parameters (and optimizer state) in place; returns meta."""
    records = read_tensor_records(path)
    for prefix, net in nets.items():
        for k, t in net.named_params().items():
            key = f"param.{prefix}.{k}"
            if key not in records:
                raise ContractViolation(f"checkpoint misses {key}")
            t.data[...] = records[key].reshape(t.data.shape)
        for k, a in net.named_state().items():
            a[...] = records[f"state.{prefix}.{k}"].reshape(a.shape)
    if adam is not None:
        adam.load_state(records)
    return {k[len("meta."):]: float(v[0]) for k, v in records.items()
            if k.startswith("meta.")}


# self-supervised loop ---------------------------------------------------------

def _batch_tensors(batch: Sample):
    target = Tensor(batch.target)
    sources = [Tensor(s) for s in batch.sources]
    known = [None if t is None else Tensor(t) for t in batch.transforms]
    return target, sources, known


def _source_transforms(pose_net, target, sources, known, cfg):
    """Known relative motions pass through; the rest come from the pose net."""
    out = []
    for src, mat in zip(sources, known):
        if mat is not None and not cfg.use_pose_net:
            out.append(mat)
        elif pose_net is not None:
            out.append(pose_to_matrix(pose_net(target, src)))
        elif mat is not None:
            out.append(mat)
        else:
            raise ContractViolation("no pose source for an unknown motion")
    return out


def _mean_re(breakdown: dict) -> float:
    vals = [v for k, v in breakdown.items() if k.startswith("re_")]
    return float(np.mean(vals))


def train_selfsup(depth_net, pose_net, samples: list, cfg: TrainConfig,
                  out_dir, resume_from=None, extra_meta=None) -> TrainResult:
    """Joint optimization of depth and pose on view-synthesis losses.

    Writes train_log.txt and one checkpoint per epoch into out_dir.  A
    non-finite loss aborts with TrainingAborted after the previous epoch's
    checkpoint is already safely on disk.  resume_from restores a checkpoint
    (parameters, running statistics, optimizer slots) and continues with the
    epoch after the one it recorded; batch order depends only on
    (seed, epoch), so the resumed trajectory matches an uninterrupted run.
    extra_meta (numeric values) is stored alongside epoch/step in every
    checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    named = {f"depth.{k}": t for k, t in depth_net.named_params().items()}
    nets = {"depth": depth_net}
    if pose_net is not None:
        named.update({f"pose.{k}": t
                      for k, t in pose_net.named_params().items()})
        nets["pose"] = pose_net
    by_id = {id(t): k for k, t in named.items()}
    adam = Adam(named, lr=cfg.lr)
    start_epoch = 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, nets, adam)
        start_epoch = int(meta["epoch"]) + 1
    result = TrainResult()
    step = start_epoch * (len(samples) // cfg.batch_size)

    for epoch in range(start_epoch, cfg.epochs):
        adam.lr = cfg.lr_at(epoch)
        for idx in epoch_indices(len(samples), cfg.batch_size, cfg.seed, epoch):
            batch = collate([samples[i] for i in idx])
            target, sources, known = _batch_tensors(batch)
            with Tape() as tape:
                # the loss may train on fewer scales than the net emits
                disps = depth_net(target, training=True)[:cfg.loss.num_scales]
                transforms = _source_transforms(pose_net, target, sources,
                                                known, cfg)
                finite = (all(np.isfinite(d.data).all() for d in disps)
                          and all(np.isfinite(t.data).all()
                                  for t in transforms))
                if finite:
                    warp = WarpBatch(target=target, sources=sources,
                                     transforms=transforms, cam=batch.cam,
                                     depth_range=cfg.depth_range)
                    loss, breakdown = total_loss(disps, warp, cfg.loss)
                if not finite or not np.isfinite(loss.data):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"last good checkpoint: "
                        f"{result.checkpoints[-1] if result.checkpoints else 'none'}")
                grads = tape.backward(loss)
            by_name = {by_id[id(t)]: g for t, g in grads.items()
                       if id(t) in by_id}
            if not adam.step(by_name):
                result.rejected_steps += 1
            step += 1
            rec = {"epoch": epoch, "step": step,
                   "loss": float(loss.data), "re": _mean_re(breakdown)}
            result.records.append(rec)
            detail = " ".join(f"{k} {v!r}" for k, v in breakdown.items()
                              if k != "total")
            result.log_lines.append(
                f"epoch {epoch} step {step} lr {adam.lr!r} "
                f"loss {rec['loss']!r} re {rec['re']!r} {detail}")
        ckpt = out_dir / f"checkpoint_epoch_{epoch}.bin"
        save_checkpoint(ckpt, nets, adam,
                        meta={**(extra_meta or {}),
                              "epoch": epoch, "step": step})
        result.checkpoints.append(ckpt)
    (out_dir / "train_log.txt").write_text("\n".join(result.log_lines) + "\n",
                                           encoding="ascii")
    return result


# distillation ------------------------------------------------------------------

def teacher_disparities(teacher, samples: list) -> list:
    """Teacher predictions for every sample, computed once, off the tape."""
    cached = []
    for s in samples:
        disps = teacher(Tensor(s.target[None]), training=False)
        cached.append([d.data.copy() for d in disps])
    return cached


def train_distill(teacher, student, samples: list, cfg: TrainConfig,
                  out_dir, distill_cfg: DistillConfig | None = None,
                  resume_from=None, extra_meta=None) -> TrainResult:
    """Student mimics the frozen teacher's disparities at every scale."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    distill_cfg = distill_cfg or DistillConfig()
    cache = teacher_disparities(teacher, samples)
    named = {f"depth.{k}": t for k, t in student.named_params().items()}
    by_id = {id(t): k for k, t in named.items()}
    adam = Adam(named, lr=cfg.lr)
    start_epoch = 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, {"depth": student}, adam)
        start_epoch = int(meta["epoch"]) + 1
    result = TrainResult()
    step = start_epoch * (len(samples) // cfg.batch_size)

    for epoch in range(start_epoch, cfg.epochs):
        adam.lr = cfg.lr_at(epoch)
        for idx in epoch_indices(len(samples), cfg.batch_size, cfg.seed, epoch):
            batch = collate([samples[i] for i in idx])
            target = Tensor(batch.target)
            teacher_maps = [
                np.concatenate([cache[i][s] for i in idx])
                for s in range(len(cache[idx[0]]))]
            with Tape() as tape:
                student_disps = student(target, training=True)
                loss = distill_loss(teacher_maps, student_disps, distill_cfg)
                if not np.isfinite(loss.data):
                    raise TrainingAborted(
                        f"non-finite distillation loss at epoch {epoch}")
                grads = tape.backward(loss)
            by_name = {by_id[id(t)]: g for t, g in grads.items()
                       if id(t) in by_id}
            if not adam.step(by_name):
                result.rejected_steps += 1
            step += 1
            rec = {"epoch": epoch, "step": step, "loss": float(loss.data),
                   "re": float(loss.data)}
            result.records.append(rec)
            result.log_lines.append(
                f"epoch {epoch} step {step} lr {adam.lr!r} "
                f"distill {rec['loss']!r}")
        ckpt = out_dir / f"checkpoint_epoch_{epoch}.bin"
        save_checkpoint(ckpt, {"depth": student}, adam,
                        meta={**(extra_meta or {}),
                              "epoch": epoch, "step": step})
        result.checkpoints.append(ckpt)
    (out_dir / "train_log.txt").write_text("\n".join(result.log_lines) + "\n",
                                           encoding="ascii")
    return result
