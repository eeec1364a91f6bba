import numpy as np
import pytest

from hrdepth.arch import DepthNet, preset
from hrdepth.data import make_sample, two_plane_scene
from hrdepth.evaluation import (DepthMetrics, METRIC_NAMES, depth_metrics,
                                evaluate_depth_net, gradient_bands,
                                interp_gap_analysis, mean_metrics,
                                metrics_lines, metrics_table, read_metrics,
                                save_error_image, save_gray16, write_metrics)
from hrdepth.geometry import DepthRange
from hrdepth.ops import resize_array
from hrdepth.tensor import ContractViolation


def _metrics_oracle(pred, gt, min_depth=1e-3, max_depth=80.0,
                    median_scale=True):
    """Pure-Python per-pixel reference for the metric formulas."""
    pv, gv = [], []
    h, w = gt.shape
    for y in range(h):
        for x in range(w):
            if gt[y, x] > 0:
                pv.append(float(pred[y, x]))
                gv.append(float(gt[y, x]))

    def med(vals):
        s = sorted(vals)
        n = len(s)
        return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2

    if median_scale:
        ratio = med(gv) / med(pv)
        pv = [p * ratio for p in pv]
    pv = [min(max(p, min_depth), max_depth) for p in pv]
    n = len(pv)
    abs_rel = sq_rel = rmse = rmse_log = a1 = a2 = a3 = 0.0
    for p, g in zip(pv, gv):
        d = g - p
        abs_rel += abs(d) / g
        sq_rel += d * d / g
        rmse += d * d
        rmse_log += (np.log(g) - np.log(p)) ** 2
        r = max(g / p, p / g)
        a1 += r < 1.25
        a2 += r < 1.25 ** 2
        a3 += r < 1.25 ** 3
    return (abs_rel / n, sq_rel / n, np.sqrt(rmse / n),
            np.sqrt(rmse_log / n), a1 / n, a2 / n, a3 / n)


def test_metrics_match_loop_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = rng.uniform(1.0, 60.0, size=(24, 36))
        gt[rng.uniform(size=gt.shape) < 0.1] = 0.0  # invalid holes
        pred = gt * rng.uniform(0.6, 1.6, size=gt.shape) + 0.05
        got = depth_metrics(pred, gt)
        want = _metrics_oracle(pred, gt)
        for name, w in zip(METRIC_NAMES, want):
            assert getattr(got, name) == pytest.approx(w, rel=1e-12, abs=1e-12)


def test_metrics_perfect_prediction():
    rng = np.random.default_rng(1)
    gt = rng.uniform(2.0, 50.0, size=(10, 10))
    m = depth_metrics(gt.copy(), gt)
    assert m.abs_rel == 0 and m.sq_rel == 0 and m.rmse == 0
    assert m.a1 == 1 and m.a2 == 1 and m.a3 == 1


def test_median_scaling_invariant_under_power_of_two_gain():
    # scaling by powers of two is exact in floating point, so the
    # median-scaled metrics must be bitwise identical
    rng = np.random.default_rng(2)
    gt = rng.uniform(1.0, 40.0, size=(17, 23))
    pred = gt * rng.uniform(0.8, 1.2, size=gt.shape)
    base = depth_metrics(pred, gt)
    for gain in (0.25, 0.5, 2.0, 8.0, 64.0):
        scaled = depth_metrics(pred * gain, gt)
        for name in METRIC_NAMES:
            assert getattr(scaled, name) == getattr(base, name)


def test_metrics_without_median_scaling_sees_gain():
    gt = np.full((4, 4), 10.0)
    m = depth_metrics(gt * 2.0, gt, median_scale=False)
    assert m.abs_rel == pytest.approx(1.0)
    m2 = depth_metrics(gt * 2.0, gt, median_scale=True)
    assert m2.abs_rel == 0.0


def test_threshold_accuracy_is_strict():
    gt = np.full((2, 2), 4.0)
    pred = np.full((2, 2), 5.0)  # ratio exactly 1.25
    m = depth_metrics(pred, gt, median_scale=False)
    assert m.a1 == 0.0
    assert m.a2 == 1.0


def test_prediction_clamped_to_depth_limits():
    gt = np.array([[10.0, 10.0]])
    pred = np.array([[500.0, 10.0]])
    m = depth_metrics(pred, gt, median_scale=False, max_depth=80.0)
    # the 500 m pixel is evaluated as 80 m
    assert m.rmse == pytest.approx(np.sqrt(70.0 ** 2 / 2), rel=1e-12)


def test_metrics_validation():
    gt = np.ones((3, 3))
    with pytest.raises(ContractViolation):
        depth_metrics(np.ones((2, 3)), gt)
    with pytest.raises(ContractViolation):
        depth_metrics(np.ones((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ContractViolation):
        depth_metrics(-np.ones((3, 3)), gt)


def test_mean_metrics_averages_fields():
    a = DepthMetrics(1, 2, 3, 4, 5, 6, 7)
    b = DepthMetrics(3, 4, 5, 6, 7, 8, 9)
    m = mean_metrics([a, b])
    assert m.abs_rel == 2 and m.a3 == 8
    with pytest.raises(ContractViolation):
        mean_metrics([])


def test_metrics_table_one_row_per_run():
    a = DepthMetrics(0.1, 0.2, 3.0, 0.15, 0.8, 0.9, 0.95)
    b = DepthMetrics(0.2, 0.3, 4.0, 0.25, 0.7, 0.8, 0.85)
    lines = metrics_table([("net-a", "320x96", a), ("net-b", "640x192", b)])
    assert len(lines) == 3
    assert all(name in lines[0] for name in METRIC_NAMES)
    assert "net-a" in lines[1] and "net-b" in lines[2]
    # column order is stable between header and rows
    assert lines[0].index("abs_rel") < lines[0].index("a1")
    with pytest.raises(ContractViolation):
        metrics_table([])


def test_metrics_file_round_trip(tmp_path):
    m = DepthMetrics(0.1234, 0.5, 3.25, 0.125, 0.875, 0.96875, 1.0)
    path = tmp_path / "metrics.txt"
    write_metrics(path, m)
    assert read_metrics(path) == m
    assert len(metrics_lines(m)) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("abs_rel=0.1\n")
    with pytest.raises(ContractViolation):
        read_metrics(bad)


def test_evaluate_depth_net_runs_on_synthetic_scene():
    spec = two_plane_scene(width=96, height=64, frames=3)
    samples = [make_sample(spec, 1)]
    net = DepthNet(preset("toy-small"), seed=0)
    m = evaluate_depth_net(net, samples, DepthRange(0.1, 100.0))
    for name in METRIC_NAMES:
        assert np.isfinite(getattr(m, name))
    # an untrained net should not be accurate on a 5 m / 50 m split
    assert m.abs_rel > 0.01


# ---------------------------------------------------------------------------
# gradient-band interpolation study

def test_gradient_bands_partition_and_order():
    rng = np.random.default_rng(3)
    gt = rng.uniform(2.0, 30.0, size=(20, 32))
    pred = gt * (1 + 0.01 * rng.standard_normal(gt.shape))
    bands = gradient_bands(gt, pred)
    assert len(bands) == 4
    assert sum(b.pixel_count for b in bands) == gt.size
    grads = [b.mean_gradient for b in bands]
    assert grads == sorted(grads)


def test_gradient_bands_constant_scene_collapses_to_bottom():
    gt = np.full((4, 4), 10.0)
    pred = gt.copy()
    pred[0, 0] = 12.0  # one bad pixel, abs_rel 0.2
    bands = gradient_bands(gt, pred)
    # zero gradient everywhere: the quantile edges tie at zero, so every
    # pixel collapses into the bottom band and the rest stay empty
    assert bands[0].pixel_count == 16
    assert bands[0].abs_rel == pytest.approx(0.2 / 16, rel=1e-12)
    assert all(b.pixel_count == 0 and b.abs_rel == 0 for b in bands[1:])
    assert all(b.mean_gradient == 0 for b in bands)


def test_gradient_bands_step_scene_isolates_the_edge():
    gt = np.full((8, 8), 5.0)
    gt[:, 4:] = 50.0
    pred = gt.copy()
    bands = gradient_bands(gt, pred)
    # only pixels touching the step carry gradient; they fill the top band
    assert bands[0].pixel_count + bands[-1].pixel_count == gt.size
    assert bands[-1].mean_gradient == pytest.approx(45.0)
    assert bands[0].mean_gradient == 0.0


def test_gradient_bands_validation():
    with pytest.raises(ContractViolation):
        gradient_bands(np.ones((4, 4)), np.ones((4, 5)))
    with pytest.raises(ContractViolation):
        gradient_bands(np.zeros((4, 4)), np.ones((4, 4)))


def test_interp_gap_localizes_upsampling_error_at_depth_edges():
    from hrdepth.data import render_frame
    spec = two_plane_scene()
    _, gt = render_frame(spec, 0)
    gt_hr = gt[0]
    rng = np.random.default_rng(4)
    pred_hr = gt_hr * (1.0 + 0.005 * rng.standard_normal(gt_hr.shape))
    report = interp_gap_analysis(pred_hr, gt_hr, factor=4)
    top_lr, bottom_lr = report.lr_up[-1].abs_rel, report.lr_up[0].abs_rel
    # interpolation error concentrates where the true depth jumps
    assert top_lr >= 5.0 * bottom_lr
    assert top_lr > report.hr[-1].abs_rel
    text = "\n".join(report.lines())
    assert "lr_up" in text and str(report.factor) in text


def test_interp_gap_lr_is_accurate_at_its_own_scale():
    # the downsampled prediction explains downsampled truth far better than
    # its upsampled version explains the original: the interpolation step
    # itself, not the low resolution, carries the error at depth edges
    from hrdepth.data import render_frame
    _, gt = render_frame(two_plane_scene(), 0)
    report = interp_gap_analysis(gt[0].copy(), gt[0], factor=4)
    assert report.lr[-1].abs_rel < report.lr_up[-1].abs_rel
    counts = sum(b.pixel_count for b in report.lr)
    assert counts == (gt.shape[1] // 4) * (gt.shape[2] // 4)


def test_interp_gap_constant_scene_is_exact():
    gt = np.full((16, 24), 7.0)
    report = interp_gap_analysis(gt.copy(), gt, factor=4)
    for band in report.hr + report.lr + report.lr_up:
        assert band.abs_rel == 0.0


def test_interp_gap_validates_shapes():
    gt = np.ones((16, 16)) * 5.0
    with pytest.raises(ContractViolation):
        interp_gap_analysis(np.ones((5, 4)) * 5.0, gt, factor=4)
    with pytest.raises(ContractViolation):
        interp_gap_analysis(gt, gt, factor=5)


# ---------------------------------------------------------------------------
# image output

def test_save_gray16_round_trip(tmp_path):
    from PIL import Image
    rng = np.random.default_rng(5)
    depth = rng.uniform(0.0, 42.0, size=(8, 12))
    path = tmp_path / "depth.png"
    scale = save_gray16(path, depth)
    assert scale == pytest.approx(65535.0 / depth.max(), rel=1e-12)
    back = np.asarray(Image.open(path), dtype=np.float64)
    assert back.shape == depth.shape
    assert np.max(np.abs(back / scale - depth)) <= 0.5 / scale


def test_save_gray16_fixed_scale_and_validation(tmp_path):
    path = tmp_path / "d.png"
    out = save_gray16(path, np.ones((4, 4)), scale=100.0)
    assert out == 100.0
    with pytest.raises(ContractViolation):
        save_gray16(path, np.full((2, 2), np.nan))
    with pytest.raises(ContractViolation):
        save_gray16(path, -np.ones((2, 2)))


def test_save_error_image(tmp_path):
    from PIL import Image
    gt = np.full((6, 6), 10.0)
    pred = gt.copy()
    pred[2, 3] = 15.0
    path = tmp_path / "err.png"
    save_error_image(path, gt, pred)
    img = np.asarray(Image.open(path))
    assert img.dtype == np.uint8
    assert img[2, 3] == 255
    assert img[0, 0] == 0
