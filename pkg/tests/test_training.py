import filecmp
from dataclasses import replace

import numpy as np
import pytest

from hrdepth.arch import DepthNet, PoseNet, preset
from hrdepth.data import scene_samples, two_plane_scene
from hrdepth.losses import LossConfig
from hrdepth.tensor import ContractViolation, Tensor
from hrdepth.training import (Adam, TrainConfig, TrainingAborted,
                              load_checkpoint, save_checkpoint, train_distill,
                              train_selfsup)

SMALL_POSE = dict(enc_widths=(4, 4, 8, 16, 32), head_width=16)


def _scene_setup(seed=0):
    spec = two_plane_scene(width=64, height=32, frames=3)
    samples = scene_samples(spec)
    net = DepthNet(replace(preset("toy-small"), scales=2), seed=seed)
    pose = PoseNet(seed=seed + 1, **SMALL_POSE)
    cfg = TrainConfig(epochs=2, batch_size=1, lr=1e-3, decay_epoch=10,
                      seed=0, loss=LossConfig(num_scales=2))
    return samples, net, pose, cfg


# optimizer -------------------------------------------------------------------

def test_adam_first_step_is_scaled_learning_rate():
    # with bias correction, a unit gradient moves the weight by almost
    # exactly -lr on the first step
    p = Tensor(np.zeros((3,)))
    opt = Adam({"w": p}, lr=1e-3)
    assert opt.step({"w": np.ones(3)})
    assert np.allclose(p.data, -1e-3 / (1.0 + 1e-8), rtol=0, atol=0)


def test_adam_rejects_non_finite_gradients():
    p = Tensor(np.array([1.0, 2.0]))
    opt = Adam({"w": p}, lr=0.1)
    before = p.data.copy()
    assert not opt.step({"w": np.array([1.0, np.nan])})
    assert np.array_equal(p.data, before)
    assert opt.t == 0
    assert np.all(opt.m["w"] == 0) and np.all(opt.v["w"] == 0)
    assert not opt.step({"w": np.array([np.inf, 0.0])})


def test_adam_skips_missing_and_none_gradients():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    opt = Adam({"a": a, "b": b}, lr=0.1)
    assert opt.step({"a": np.ones(2), "b": None})
    assert not np.array_equal(a.data, np.ones(2))
    assert np.array_equal(b.data, np.ones(2))


def test_adam_state_round_trip_preserves_trajectory():
    rng = np.random.default_rng(0)
    grads = [{"w": rng.standard_normal(4)} for _ in range(5)]

    p1 = Tensor(np.zeros(4))
    opt1 = Adam({"w": p1}, lr=1e-2)
    for g in grads[:3]:
        opt1.step(g)
    saved = {k: v.copy() for k, v in opt1.state_arrays().items()}
    snapshot = p1.data.copy()
    for g in grads[3:]:
        opt1.step(g)

    p2 = Tensor(snapshot.copy())
    opt2 = Adam({"w": p2}, lr=1e-2)
    opt2.load_state(saved)
    assert opt2.t == 3
    for g in grads[3:]:
        opt2.step(g)
    assert np.array_equal(p1.data, p2.data)


def test_adam_validates_hyperparameters():
    with pytest.raises(ContractViolation):
        Adam({}, lr=0.0)
    with pytest.raises(ContractViolation):
        Adam({}, beta1=1.0)


def test_lr_schedule_steps_down_once():
    cfg = TrainConfig(lr=1e-3, decay_epoch=2)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(1) == 1e-3
    assert cfg.lr_at(2) == pytest.approx(1e-4)
    assert cfg.lr_at(7) == pytest.approx(1e-4)


# checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_restores_everything(tmp_path):
    net = DepthNet(preset("toy-small"), seed=3)
    pose = PoseNet(seed=4, **SMALL_POSE)
    nets = {"depth": net, "pose": pose}
    named = {f"{p}.{k}": t for p, n in nets.items()
             for k, t in n.named_params().items()}
    adam = Adam(named, lr=1e-3)
    adam.step({k: np.ones_like(t.data) for k, t in named.items()})

    want_params = {k: t.data.copy() for k, t in named.items()}
    want_state = {f"{p}.{k}": a.copy() for p, n in nets.items()
                  for k, a in n.named_state().items()}
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, nets, adam, meta={"epoch": 5, "step": 17})

    for t in named.values():
        t.data += 0.25
    for n in nets.values():
        for a in n.named_state().values():
            a += 1.0
    adam2 = Adam(named, lr=1e-3)
    meta = load_checkpoint(path, nets, adam2)

    assert meta == {"epoch": 5.0, "step": 17.0}
    for k, t in named.items():
        assert np.array_equal(t.data, want_params[k]), k
    for p, n in nets.items():
        for k, a in n.named_state().items():
            assert np.array_equal(a, want_state[f"{p}.{k}"]), (p, k)
    assert adam2.t == adam.t
    for k in named:
        assert np.array_equal(adam2.m[k], adam.m[k])


def test_checkpoint_missing_parameter_rejected(tmp_path):
    net = DepthNet(preset("toy-small"), seed=0)
    path = tmp_path / "depth_only.bin"
    save_checkpoint(path, {"depth": net})
    with pytest.raises(ContractViolation):
        load_checkpoint(path, {"depth": net,
                               "pose": PoseNet(seed=1, **SMALL_POSE)})


# self-supervised loop ---------------------------------------------------------

def test_selfsup_two_runs_are_bitwise_identical(tmp_path):
    outputs = []
    for run in ("a", "b"):
        samples, net, pose, cfg = _scene_setup()
        res = train_selfsup(net, pose, samples, cfg, tmp_path / run)
        outputs.append(res)
    ra, rb = outputs
    assert ra.log_lines == rb.log_lines
    assert len(ra.checkpoints) == 2
    for ca, cb in zip(ra.checkpoints, rb.checkpoints):
        assert filecmp.cmp(ca, cb, shallow=False)
    assert ((tmp_path / "a" / "train_log.txt").read_bytes()
            == (tmp_path / "b" / "train_log.txt").read_bytes())


def test_selfsup_resume_matches_uninterrupted_run(tmp_path):
    samples, net, pose, cfg = _scene_setup()
    cfg = replace(cfg, epochs=3)
    full = train_selfsup(net, pose, samples, cfg, tmp_path / "full")

    samples2, net2, pose2, _ = _scene_setup()
    part_cfg = replace(cfg, epochs=1)
    part = train_selfsup(net2, pose2, samples2, part_cfg, tmp_path / "part")
    rest = train_selfsup(net2, pose2, samples2, cfg, tmp_path / "rest",
                         resume_from=part.checkpoints[-1])

    assert part.log_lines + rest.log_lines == full.log_lines
    assert filecmp.cmp(rest.checkpoints[-1], full.checkpoints[-1],
                       shallow=False)


def test_selfsup_known_transforms_without_pose_net(tmp_path):
    samples, net, _, cfg = _scene_setup()
    cfg = replace(cfg, epochs=1, use_pose_net=False)
    res = train_selfsup(net, None, samples, cfg, tmp_path)
    assert len(res.records) == len(samples)
    assert all(np.isfinite(r["loss"]) for r in res.records)


def test_selfsup_unknown_transform_without_pose_net_rejected(tmp_path):
    samples, net, _, cfg = _scene_setup()
    for s in samples:
        s.transforms[0] = None
    with pytest.raises(ContractViolation):
        train_selfsup(net, None, samples, replace(cfg, epochs=1), tmp_path)


def test_selfsup_aborts_on_non_finite_loss(tmp_path):
    samples, net, pose, cfg = _scene_setup()
    next(iter(net.named_params().values())).data[...] = np.nan
    with pytest.raises(TrainingAborted, match="non-finite"):
        train_selfsup(net, pose, samples, replace(cfg, epochs=1), tmp_path)
    assert not list(tmp_path.glob("checkpoint_*.bin"))


def test_selfsup_loss_moves_and_logs_schedule(tmp_path):
    samples, net, pose, cfg = _scene_setup()
    cfg = replace(cfg, epochs=2, decay_epoch=1)
    res = train_selfsup(net, pose, samples, cfg, tmp_path)
    assert res.records[-1]["loss"] != res.records[0]["loss"]
    assert "lr 0.001 " in res.log_lines[0]
    assert "lr 0.0001 " in res.log_lines[-1]
    assert res.rejected_steps == 0
    # every record carries the mean photometric term
    assert all(r["re"] > 0 for r in res.records)


# distillation ------------------------------------------------------------------

def test_distill_converges_and_freezes_teacher(tmp_path):
    samples, teacher, _, cfg = _scene_setup(seed=7)
    student = DepthNet(replace(preset("toy-small"), scales=2), seed=11)
    teacher_bits = {k: t.data.copy()
                    for k, t in teacher.named_params().items()}
    cfg = replace(cfg, epochs=4, lr=1e-2)
    res = train_distill(teacher, student, samples, cfg, tmp_path)
    assert res.records[-1]["loss"] < res.records[0]["loss"]
    for k, t in teacher.named_params().items():
        assert np.array_equal(t.data, teacher_bits[k]), k
    assert "distill" in res.log_lines[0]
    assert (tmp_path / "train_log.txt").exists()


def test_distill_resume_matches_uninterrupted_run(tmp_path):
    samples, teacher, _, cfg = _scene_setup(seed=5)
    cfg = replace(cfg, epochs=2)

    s1 = DepthNet(replace(preset("toy-small"), scales=2), seed=9)
    full = train_distill(teacher, s1, samples, cfg, tmp_path / "full")

    s2 = DepthNet(replace(preset("toy-small"), scales=2), seed=9)
    part = train_distill(teacher, s2, samples, replace(cfg, epochs=1),
                         tmp_path / "part")
    rest = train_distill(teacher, s2, samples, cfg, tmp_path / "rest",
                         resume_from=part.checkpoints[-1])
    assert part.log_lines + rest.log_lines == full.log_lines
    assert filecmp.cmp(rest.checkpoints[-1], full.checkpoints[-1],
                       shallow=False)
