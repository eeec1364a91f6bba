import pytest

from hrdepth.gradsuite import (CHECKS, CheckResult, run_check, run_suite,
                               suite_lines)
from hrdepth.tensor import ContractViolation

# every differentiable op and every loss must have a registered check
EXPECTED_CHECKS = {
    "absolute", "add", "add_channel_bias", "add_scalar",
    "batch_norm_inference", "batch_norm_training", "bilinear_resize_down",
    "bilinear_resize_up", "box_filter_reflect", "box_filter_zero", "concat",
    "conv2d", "conv2d_strided_reflect", "cos", "depthwise_conv2d",
    "disp_to_depth", "distill_l1", "distill_l2", "div", "elu", "exp",
    "fanout_reuse", "fully_connected", "global_avg_pool",
    "grid_sample_bilinear", "log", "masked_mean", "matmul", "matmul_batched",
    "max_pool2d", "maximum", "mean_all", "mean_channels", "mean_spatial",
    "min_reprojection", "minimum", "mul", "mul_gate", "mul_scalar", "neg",
    "pad2d_reflect", "pad2d_zero", "photometric_error", "pose_to_matrix",
    "reciprocal", "relu", "reshape", "scale_channels", "sigmoid", "sin",
    "slice_axis", "smoothness", "sqrt", "ssim", "stack", "sub", "sum_all",
    "synthesize_view", "total_loss", "total_loss_automask",
    "transpose_last2", "upsample2x", "warp_grid", "warp_photometric_chain",
}


def test_registry_names():
    assert set(CHECKS) == EXPECTED_CHECKS


def test_unknown_check_rejected():
    with pytest.raises(ContractViolation, match="unknown check"):
        run_check("no_such_op", seeds=1)


def test_seed_count_validated():
    with pytest.raises(ContractViolation, match="seed"):
        run_check("add", seeds=0)


def test_elementwise_checks_pass():
    for result in run_suite(["add", "mul", "relu", "sigmoid"], seeds=2):
        assert result.ok(), result


def test_composite_chain_passes():
    result = run_check("warp_photometric_chain", seeds=1)
    assert result.ok()
    assert result.seeds == 1


def test_check_is_deterministic():
    a = run_check("matmul", seeds=2)
    b = run_check("matmul", seeds=2)
    assert a.max_rel_err == b.max_rel_err


def test_eps_override_accepted():
    assert run_check("sin", seeds=1, eps=1e-4).ok()


def test_ok_threshold_is_inclusive():
    assert CheckResult("x", 1e-5, 1, 0.0).ok()
    assert not CheckResult("x", 1.01e-5, 1, 0.0).ok()


def test_suite_lines_format():
    results = [CheckResult("alpha", 1.0e-9, 2, 0.1),
               CheckResult("betabeta", 2.0e-3, 2, 0.1)]
    lines = suite_lines(results, tol=1e-5)
    assert lines[0].startswith("alpha   ")
    assert lines[0].endswith("PASS")
    assert lines[1].startswith("betabeta")
    assert lines[1].endswith("FAIL")
    assert lines[2] == "2 checks, 1 over tolerance 1e-05"
