"""Loss-stack tests: SSIM against a loop oracle, min-reprojection folding,
automasking, smoothness on analytic ramps, the multi-scale total, and
distillation gradients."""

import numpy as np
import pytest

from hrdepth import tensor as tt
from hrdepth.geometry import (CameraIntrinsics, DepthRange, depth_to_disp_array,
                              stereo_transform)
from hrdepth.losses import (DistillConfig, LossConfig, WarpBatch, distill_loss,
                            masked_mean, min_reprojection, photometric_error,
                            smoothness, ssim, total_loss)
from hrdepth.ops import bilinear_resize
from hrdepth.tensor import ContractViolation, Tape, Tensor, grad_check


def ssim_oracle(a, b, win=3, c1=1e-4, c2=9e-4):
    """Independent windowed-SSIM computation with explicit loops."""
    p = win // 2
    ap = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    bp = np.pad(b, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    out = np.zeros_like(a)
    bs, cs, h, w = a.shape
    for bi in range(bs):
        for ci in range(cs):
            for i in range(h):
                for j in range(w):
                    wa = ap[bi, ci, i:i + win, j:j + win]
                    wb = bp[bi, ci, i:i + win, j:j + win]
                    mu_a, mu_b = wa.mean(), wb.mean()
                    var_a = (wa * wa).mean() - mu_a ** 2
                    var_b = (wb * wb).mean() - mu_b ** 2
                    cov = (wa * wb).mean() - mu_a * mu_b
                    out[bi, ci, i, j] = (
                        (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return out


def test_ssim_identical_images_is_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0, 1, (2, 3, 6, 7)))
    s = ssim(x, x)
    np.testing.assert_allclose(s.data, 1.0, rtol=0, atol=1e-12)


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (1, 2, 5, 6))
    b = rng.uniform(0, 1, (1, 2, 5, 6))
    got = ssim(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, ssim_oracle(a, b), rtol=1e-12, atol=1e-12)


def test_ssim_shape_mismatch_rejected():
    with pytest.raises(ContractViolation):
        ssim(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


def test_photometric_error_zero_for_identical():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(0, 1, (1, 3, 5, 5)))
    err = photometric_error(x, x)
    assert err.data.shape == (1, 1, 5, 5)
    np.testing.assert_allclose(err.data, 0.0, atol=1e-12)


def test_photometric_error_blend_weights():
    # constant offset makes the L1 term exact; SSIM term stays in [0, 1]
    a = Tensor(np.full((1, 3, 6, 6), 0.4))
    b = Tensor(np.full((1, 3, 6, 6), 0.6))
    cfg = LossConfig(alpha=0.85)
    err = photometric_error(a, b, cfg).data
    # constant images: mu_a*mu_b term dominates, variances are zero
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    s = (2 * 0.4 * 0.6 + c1) * c2 / ((0.16 + 0.36 + c1) * c2)
    expect = 0.425 * (1 - s) + 0.15 * 0.2
    # box-filtered variances of a constant image are ~1e-17, not exactly 0
    np.testing.assert_allclose(err, expect, rtol=1e-11)


def test_min_reprojection_pixelwise():
    a = Tensor(np.array([[[[1.0, 5.0]]]]))
    b = Tensor(np.array([[[[4.0, 2.0]]]]))
    out, keep = min_reprojection([a, b])
    assert keep is None
    np.testing.assert_array_equal(out.data, [[[[1.0, 2.0]]]])


def test_min_reprojection_routes_gradients_to_winner():
    a = Tensor(np.array([[[[1.0, 5.0]]]]), requires_grad=True)
    b = Tensor(np.array([[[[4.0, 2.0]]]]), requires_grad=True)
    with Tape() as tape:
        out, _ = min_reprojection([a, b])
        grads = tape.backward(tt.sum_all(out))
    np.testing.assert_array_equal(grads[a], [[[[1.0, 0.0]]]])
    np.testing.assert_array_equal(grads[b], [[[[0.0, 1.0]]]])


def test_automask_keep_mask():
    warped = [Tensor(np.array([[[[0.3, 0.1, 0.5]]]]))]
    # identity error smaller than warped at the middle pixel only
    ident = [Tensor(np.array([[[[0.4, 0.05, 0.9]]]]))]
    out, keep = min_reprojection(warped, ident)
    np.testing.assert_array_equal(keep, [[[[True, False, True]]]])
    m = masked_mean(out, keep)
    np.testing.assert_allclose(m.data, (0.3 + 0.5) / 2, rtol=1e-12)


def test_masked_mean_empty_mask_falls_back_to_full_mean():
    x = Tensor(np.array([[[[1.0, 3.0]]]]))
    m = masked_mean(x, np.zeros((1, 1, 1, 2), bool))
    np.testing.assert_allclose(m.data, 2.0)


def test_smoothness_linear_ramp_constant_image():
    # normalized disparity ramp: mean |forward diff| = g / mean(d); the
    # constant image contributes exp(0) = 1 weights and no y-term
    h, w, g, d0 = 5, 8, 0.03, 0.4
    ramp = d0 + g * np.arange(w)
    disp = Tensor(np.broadcast_to(ramp, (1, 1, h, w)).copy())
    img = Tensor(np.full((1, 3, h, w), 0.5))
    expect = g / ramp.mean()
    np.testing.assert_allclose(smoothness(disp, img).data, expect, rtol=1e-12)


def test_smoothness_is_scale_invariant():
    rng = np.random.default_rng(3)
    d = rng.uniform(0.2, 0.8, (1, 1, 6, 7))
    img = Tensor(rng.uniform(0, 1, (1, 3, 6, 7)))
    a = smoothness(Tensor(d), img).data
    b = smoothness(Tensor(4.0 * d), img).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_smoothness_edge_weighting_discounts_image_edges():
    d = np.ones((1, 1, 4, 6))
    d[:, :, :, 3:] = 2.0  # disparity step at column 3
    flat = Tensor(np.full((1, 3, 4, 6), 0.5))
    edged = np.full((1, 3, 4, 6), 0.5)
    edged[:, :, :, 3:] = 5.0  # image edge aligned with the disparity step
    a = smoothness(Tensor(d.copy()), flat).data
    b = smoothness(Tensor(d.copy()), Tensor(edged)).data
    assert b < a


def test_smoothness_validates_shapes():
    with pytest.raises(ContractViolation):
        smoothness(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 4, 4))))
    with pytest.raises(ContractViolation):
        smoothness(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 3, 8, 8))))


def _toy_batch(rng, h=8, w=10, n_src=2):
    cam = CameraIntrinsics(fx=0.9 * w, fy=0.9 * w, cx=(w - 1) / 2,
                           cy=(h - 1) / 2, width=w, height=h)
    target = Tensor(rng.uniform(0, 1, (1, 3, h, w)))
    sources = [Tensor(rng.uniform(0, 1, (1, 3, h, w))) for _ in range(n_src)]
    transforms = [stereo_transform(0.05 * (i + 1), batch=1)
                  for i in range(n_src)]
    return WarpBatch(target=target, sources=sources, transforms=transforms,
                     cam=cam)


def test_total_loss_matches_hand_composition():
    rng = np.random.default_rng(4)
    batch = _toy_batch(rng)
    h, w = batch.target.data.shape[2:]
    disps = [Tensor(rng.uniform(0.2, 0.8, (1, 1, h, w))),
             Tensor(rng.uniform(0.2, 0.8, (1, 1, h // 2, w // 2)))]
    cfg = LossConfig(num_scales=2)
    loss, breakdown = total_loss(disps, batch, cfg)

    # recompose from the public pieces, scale by scale
    from hrdepth.geometry import disp_to_depth, synthesize_view, warp_grid
    acc = 0.0
    for disp in disps:
        d = disp if disp.data.shape[2:] == (h, w) else bilinear_resize(disp, h, w)
        depth = disp_to_depth(d, batch.depth_range)
        errs = []
        for src, tr in zip(batch.sources, batch.transforms):
            grid, _ = warp_grid(depth, batch.cam, tr)
            errs.append(photometric_error(batch.target,
                                          synthesize_view(src, grid), cfg))
        m, _ = min_reprojection(errs)
        acc += float(tt.mean_all(m).data)
        acc += cfg.smooth_weight * float(smoothness(d, batch.target).data)
    np.testing.assert_allclose(float(loss.data), acc / 2, rtol=1e-12)
    np.testing.assert_allclose(breakdown["total"], float(loss.data), rtol=0)
    assert set(breakdown) == {"re_0", "re_1", "smooth_0", "smooth_1", "total"}


def test_smooth_weight_scales_only_the_smoothness_term():
    rng = np.random.default_rng(14)
    batch = _toy_batch(rng)
    disps = [Tensor(rng.uniform(0.2, 0.8, (1, 1, 8, 10))),
             Tensor(rng.uniform(0.2, 0.8, (1, 1, 4, 5)))]
    base_cfg = LossConfig(num_scales=2)
    _, base = total_loss(disps, batch, base_cfg)
    _, tripled = total_loss(
        disps, batch, LossConfig(num_scales=2,
                                 smooth_weight=3.0 * base_cfg.smooth_weight))
    for key in ("re_0", "re_1", "smooth_0", "smooth_1"):
        assert tripled[key] == base[key]
    smooth_mean = (base["smooth_0"] + base["smooth_1"]) / 2.0
    np.testing.assert_allclose(
        tripled["total"] - base["total"],
        2.0 * base_cfg.smooth_weight * smooth_mean, rtol=1e-9)


def test_total_loss_scale_count_enforced():
    rng = np.random.default_rng(5)
    batch = _toy_batch(rng)
    disps = [Tensor(rng.uniform(0.2, 0.8, (1, 1, 8, 10)))]
    with pytest.raises(ContractViolation):
        total_loss(disps, batch, LossConfig(num_scales=4))


def test_total_loss_automask_runs_and_differs():
    rng = np.random.default_rng(6)
    batch = _toy_batch(rng)
    # make the left half of one source static so the identity error is zero
    # there (those pixels get excluded) while the rest stays in play
    half_static = batch.sources[0].data.copy()
    half_static[:, :, :, :5] = batch.target.data[:, :, :, :5]
    batch.sources[0] = Tensor(half_static)
    disps = [Tensor(rng.uniform(0.2, 0.8, (1, 1, 8, 10)))]
    on, _ = total_loss(disps, batch, LossConfig(num_scales=1, automask=True))
    off, _ = total_loss(disps, batch, LossConfig(num_scales=1, automask=False))
    assert float(on.data) != float(off.data)


def _shifted_plane(h=12, w=24, shift=2, depth=5.0):
    """Target/source pair whose correct warp is an exact integer translation."""
    cam = CameraIntrinsics(fx=8.0, fy=8.0, cx=(w - 1) / 2, cy=(h - 1) / 2,
                           width=w, height=h)
    baseline = shift * depth / cam.fx
    u = np.arange(w + shift, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    tex = (0.5 + 0.25 * np.sin(2 * np.pi * u / 9.0)[None, :]
           + 0.2 * np.cos(2 * np.pi * v / 7.0)[:, None])
    target = np.broadcast_to(tex[:, :w], (1, 3, h, w)).copy()
    source = np.broadcast_to(tex[:, shift:], (1, 3, h, w)).copy()
    return cam, baseline, target, source, depth


def test_warped_loss_is_zero_at_true_depth_interior():
    cam, baseline, target, source, depth = _shifted_plane()
    rng_cfg = DepthRange()
    disp = depth_to_disp_array(np.full((1, 1, 12, 24), depth), rng_cfg)
    from hrdepth.geometry import disp_to_depth, synthesize_view, warp_grid
    grid, valid = warp_grid(disp_to_depth(Tensor(disp), rng_cfg), cam,
                            stereo_transform(baseline, batch=1))
    warped = synthesize_view(Tensor(source), grid)
    # integer shift: interior columns are gathered bit-exactly
    assert np.array_equal(warped.data[:, :, :, 2:], target[:, :, :, 2:])
    err = photometric_error(Tensor(target), warped)
    # the SSIM window bleeds the clamped border columns one pixel inward
    assert float(err.data[:, :, :, 3:].max()) <= 1e-12
    assert valid[:, :, :, 2:].all()


def test_warped_loss_increases_away_from_true_depth():
    cam, baseline, target, source, depth = _shifted_plane()
    rng_cfg = DepthRange()
    batch = WarpBatch(target=Tensor(target), sources=[Tensor(source)],
                      transforms=[stereo_transform(baseline, batch=1)],
                      cam=cam, depth_range=rng_cfg)
    true_disp = depth_to_disp_array(np.full((1, 1, 12, 24), depth), rng_cfg)
    cfg = LossConfig(num_scales=1, smooth_weight=0.0)
    at_true, _ = total_loss([Tensor(true_disp)], batch, cfg)
    for factor in (0.7, 1.3):
        off, _ = total_loss([Tensor(true_disp * factor)], batch, cfg)
        assert float(off.data) > float(at_true.data)


def test_distill_loss_l1_gradient_is_sign_over_n():
    rng = np.random.default_rng(7)
    teacher = [rng.uniform(0.1, 0.9, (1, 1, 4, 6))]
    student = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 6)), requires_grad=True)
    with Tape() as tape:
        loss = distill_loss(teacher, [student])
        grads = tape.backward(loss)
    expect = np.sign(student.data - teacher[0]) / student.data.size
    np.testing.assert_allclose(grads[student], expect, rtol=0, atol=1e-15)


def test_distill_loss_l2_value():
    t = [np.full((1, 1, 2, 2), 0.25)]
    s = [Tensor(np.full((1, 1, 2, 2), 0.75))]
    loss = distill_loss(t, s, DistillConfig(norm="l2"))
    np.testing.assert_allclose(float(loss.data), 0.25, rtol=1e-15)


def test_distill_loss_resizes_teacher_to_student_scale():
    t = [np.full((1, 1, 8, 8), 0.5)]
    s = [Tensor(np.full((1, 1, 4, 4), 0.5))]
    loss = distill_loss(t, s)
    np.testing.assert_allclose(float(loss.data), 0.0, atol=1e-15)


def test_distill_config_rejects_unknown_norm():
    with pytest.raises(ContractViolation):
        DistillConfig(norm="huber")


def test_loss_config_validation():
    with pytest.raises(ContractViolation):
        LossConfig(alpha=1.5)
    with pytest.raises(ContractViolation):
        LossConfig(ssim_window=4)
    with pytest.raises(ContractViolation):
        LossConfig(num_scales=0)


# gradient checks ------------------------------------------------------------

def test_ssim_grad_check():
    rng = np.random.default_rng(8)
    a = Tensor(rng.uniform(0.2, 0.8, (1, 2, 4, 5)), requires_grad=True)
    b = Tensor(rng.uniform(0.2, 0.8, (1, 2, 4, 5)), requires_grad=True)
    report = grad_check(lambda x, y: ssim(x, y), [a, b])
    assert report.ok(1e-6), report.max_rel_err


def test_photometric_grad_check():
    rng = np.random.default_rng(9)
    a = Tensor(rng.uniform(0.2, 0.8, (1, 3, 4, 5)), requires_grad=True)
    b = Tensor(rng.uniform(0.2, 0.8, (1, 3, 4, 5)), requires_grad=True)
    report = grad_check(lambda x, y: photometric_error(x, y), [a, b])
    assert report.ok(1e-6), report.max_rel_err


def test_smoothness_grad_check():
    rng = np.random.default_rng(10)
    d = Tensor(rng.uniform(0.3, 0.7, (1, 1, 5, 6)), requires_grad=True)
    img = Tensor(rng.uniform(0.1, 0.9, (1, 3, 5, 6)), requires_grad=True)
    report = grad_check(lambda x, y: smoothness(x, y), [d, img])
    assert report.ok(1e-6), report.max_rel_err


def test_total_loss_grad_check_through_warp():
    # end to end: disparity -> depth -> warp grid -> sampling -> photometric
    rng = np.random.default_rng(11)
    batch = _toy_batch(rng, h=6, w=8, n_src=2)
    disp = Tensor(rng.uniform(0.3, 0.7, (1, 1, 6, 8)), requires_grad=True)
    cfg = LossConfig(num_scales=1)
    report = grad_check(lambda d: total_loss([d], batch, cfg)[0], [disp])
    assert report.ok(1e-5), report.max_rel_err


def test_total_loss_grad_check_automask():
    rng = np.random.default_rng(12)
    batch = _toy_batch(rng, h=6, w=8, n_src=2)
    disp = Tensor(rng.uniform(0.3, 0.7, (1, 1, 6, 8)), requires_grad=True)
    cfg = LossConfig(num_scales=1, automask=True)
    report = grad_check(lambda d: total_loss([d], batch, cfg)[0], [disp])
    assert report.ok(1e-5), report.max_rel_err


def test_distill_grad_check():
    rng = np.random.default_rng(13)
    teacher = [rng.uniform(0.2, 0.8, (1, 1, 4, 5))]
    # keep student away from teacher so |.| has no kinks near eval points
    student = Tensor(teacher[0] + rng.uniform(0.05, 0.2, (1, 1, 4, 5)),
                     requires_grad=True)
    report = grad_check(lambda s: distill_loss(teacher, [s]), [student])
    assert report.ok(1e-6), report.max_rel_err
