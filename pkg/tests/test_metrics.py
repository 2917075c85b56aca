"""Metric suite against naive scalar-loop oracles, plus report and
image round-trips."""

import json
import math

import numpy as np
import pytest

from deformcast.metrics import (
    ACC_ABS_LEVELS_MM,
    ACC_REL_LEVELS,
    REL_TRUTH_FLOOR_MM,
    MetricsReport,
    binned_mae,
    compute_metrics,
    event_centred_diagnostics,
    gaussian_window,
    params_digest,
    pearson_mean,
    save_heatmaps,
    ssim_mean,
    write_event_csv,
    write_pgm,
)


def stacks(seed=0, T=5, h=8, w=8, scale=4.0):
    rng = np.random.default_rng(seed)
    truth = rng.normal(0.0, scale, (T, h, w))
    pred = truth + rng.normal(0.0, 1.0, (T, h, w))
    return pred, truth


def loop_oracle(pred, truth):
    """Every pooled metric recomputed with explicit python loops."""
    n = 0
    se = 0.0
    ae = 0.0
    vals_t = []
    for t in range(truth.shape[0]):
        for i in range(truth.shape[1]):
            for j in range(truth.shape[2]):
                e = pred[t, i, j] - truth[t, i, j]
                se += e * e
                ae += abs(e)
                vals_t.append(truth[t, i, j])
                n += 1
    mean_t = sum(vals_t) / n
    ss_tot = sum((v - mean_t) ** 2 for v in vals_t)
    rel_hits = {p: 0 for p in ACC_REL_LEVELS}
    rel_n = 0
    abs_hits = {a: 0 for a in ACC_ABS_LEVELS_MM}
    for t in range(truth.shape[0]):
        for i in range(truth.shape[1]):
            for j in range(truth.shape[2]):
                e = abs(pred[t, i, j] - truth[t, i, j])
                g = abs(truth[t, i, j])
                if g >= REL_TRUTH_FLOOR_MM:
                    rel_n += 1
                    for p in ACC_REL_LEVELS:
                        if e < p * g:
                            rel_hits[p] += 1
                for a in ACC_ABS_LEVELS_MM:
                    if e < a:
                        abs_hits[a] += 1
    return {
        "rmse": math.sqrt(se / n),
        "mae": ae / n,
        "r2": 1.0 - se / ss_tot,
        "acc_rel": {p: rel_hits[p] / rel_n for p in ACC_REL_LEVELS},
        "acc_abs": {a: abs_hits[a] / n for a in ACC_ABS_LEVELS_MM},
        "excluded": n - rel_n,
    }


class TestScalarOracles:
    def test_pooled_metrics_match_loops(self):
        pred, truth = stacks(seed=1)
        rep = compute_metrics(pred, truth)
        want = loop_oracle(pred, truth)
        assert abs(rep.rmse_mm - want["rmse"]) < 1e-10
        assert abs(rep.mae_mm - want["mae"]) < 1e-10
        assert abs(rep.r2 - want["r2"]) < 1e-10
        for p in ACC_REL_LEVELS:
            assert abs(rep.acc_rel[p] - want["acc_rel"][p]) < 1e-10
        for a in ACC_ABS_LEVELS_MM:
            assert abs(rep.acc_abs[a] - want["acc_abs"][a]) < 1e-10
        assert rep.acc_rel_excluded == want["excluded"]
        assert rep.count == truth.size

    def test_perfect_prediction(self):
        _, truth = stacks(seed=2)
        rep = compute_metrics(truth.copy(), truth)
        assert rep.rmse_mm == 0.0
        assert rep.mae_mm == 0.0
        assert rep.r2 == 1.0
        assert abs(rep.ssim - 1.0) < 1e-12
        assert abs(rep.pearson - 1.0) < 1e-12
        for a in ACC_ABS_LEVELS_MM:
            assert rep.acc_abs[a] == 1.0

    def test_pearson_loop_oracle(self):
        pred, truth = stacks(seed=3)
        vals = []
        for t in range(truth.shape[0]):
            x = pred[t].ravel()
            y = truth[t].ravel()
            vals.append(float(np.corrcoef(x, y)[0, 1]))
        assert abs(pearson_mean(pred, truth) - np.mean(vals)) < 1e-10

    def test_pearson_sign_and_degenerate(self):
        _, truth = stacks(seed=4, T=3)
        assert abs(pearson_mean(-truth, truth) + 1.0) < 1e-12
        flat = np.zeros_like(truth)
        assert pearson_mean(flat, truth) == 0.0

    def test_accuracy_monotone_in_threshold(self):
        pred, truth = stacks(seed=5, scale=2.0)
        rep = compute_metrics(pred, truth)
        assert rep.acc_abs[1.0] >= rep.acc_abs[0.5] >= rep.acc_abs[0.2] >= rep.acc_abs[0.1]
        assert rep.acc_rel[0.50] >= rep.acc_rel[0.20] >= rep.acc_rel[0.10]

    def test_relative_floor_excludes_tiny_truth(self):
        truth = np.full((2, 3, 3), 1e-9)
        pred = truth + 0.5
        rep = compute_metrics(pred, truth)
        assert rep.acc_rel_excluded == truth.size
        for p in ACC_REL_LEVELS:
            assert rep.acc_rel[p] == 0.0

    def test_constant_truth_r2(self):
        truth = np.full((2, 4, 4), 5.0)
        assert compute_metrics(truth.copy(), truth).r2 == 1.0
        assert compute_metrics(truth + 1.0, truth).r2 == 0.0

    def test_input_validation(self):
        pred, truth = stacks()
        with pytest.raises(ValueError, match="shape mismatch"):
            compute_metrics(pred[:, :4], truth)
        with pytest.raises(ValueError, match="finite"):
            bad = pred.copy()
            bad[0, 0, 0] = np.nan
            compute_metrics(bad, truth)
        with pytest.raises(ValueError, match="T, H, W"):
            compute_metrics(pred[0], truth[0])


class TestSsim:
    def test_identity_is_one(self):
        _, truth = stacks(seed=6, T=3, h=16, w=16)
        assert abs(ssim_mean(truth, truth) - 1.0) < 1e-12

    def test_bounded_and_sensitive(self):
        pred, truth = stacks(seed=7, T=4, h=16, w=16)
        s = ssim_mean(pred, truth)
        assert -1.0 <= s <= 1.0
        noisier = ssim_mean(pred + np.random.default_rng(8).normal(0, 6, pred.shape), truth)
        assert noisier < s

    def test_window_normalization(self):
        win = gaussian_window(11, 1.5)
        assert win.shape == (11, 11)
        assert abs(win.sum() - 1.0) < 1e-12
        assert np.array_equal(win, win.T)

    def test_window_size_validation(self):
        for bad in (0, 4, -3):
            with pytest.raises(ValueError, match="odd"):
                gaussian_window(bad)

    def test_small_grid_window_shrinks(self):
        _, truth = stacks(seed=9, T=2, h=5, w=7)
        assert abs(ssim_mean(truth, truth) - 1.0) < 1e-12


class TestBinnedMae:
    def test_counts_partition(self):
        pred, truth = stacks(seed=10)
        bins = binned_mae(pred, truth)
        assert len(bins) == 10
        assert sum(b.count for b in bins) == truth.size
        assert all(b.hi_mm >= b.lo_mm for b in bins)

    def test_bin_contents_oracle(self):
        pred, truth = stacks(seed=11)
        bins = binned_mae(pred, truth)
        a = np.abs(truth).ravel()
        err = np.abs(pred - truth).ravel()
        b = bins[3]
        mask = (a >= b.lo_mm) & (a < b.hi_mm)
        assert b.count == mask.sum()
        assert abs(b.mae_mm - err[mask].mean()) < 1e-12

    def test_degenerate_truth_gives_empty_bins(self):
        truth = np.zeros((2, 4, 4))
        bins = binned_mae(truth + 0.3, truth)
        assert sum(b.count for b in bins) == truth.size
        assert any(b.mae_mm is None for b in bins)


class TestReportRoundTrip:
    def test_dict_round_trip(self):
        pred, truth = stacks(seed=12)
        rep = compute_metrics(pred, truth, label="unit")
        back = MetricsReport.from_dict(json.loads(rep.to_json()))
        assert back.label == "unit"
        assert back.rmse_mm == rep.rmse_mm
        assert back.mae_mm == rep.mae_mm
        assert back.r2 == rep.r2
        assert back.acc_rel == rep.acc_rel
        assert back.acc_abs == rep.acc_abs
        assert back.ssim == rep.ssim
        assert back.pearson == rep.pearson
        assert back.binned_mae == rep.binned_mae

    def test_csv_row_width(self):
        pred, truth = stacks(seed=13)
        rep = compute_metrics(pred, truth)
        assert len(rep.csv_row()) == len(MetricsReport.csv_header())

    def test_csv_values_parse_exactly(self):
        pred, truth = stacks(seed=14)
        rep = compute_metrics(pred, truth)
        row = rep.csv_row()
        assert float(row[2]) == rep.rmse_mm
        assert float(row[4]) == rep.r2


class TestParamsDigest:
    def test_order_independent(self):
        rng = np.random.default_rng(15)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(2,))
        assert params_digest({"x": a, "y": b}) == params_digest({"y": b, "x": a})

    def test_value_sensitive(self):
        a = np.zeros((2, 2))
        d1 = params_digest({"x": a})
        a2 = a.copy()
        a2[0, 0] = 1e-12
        assert params_digest({"x": a2}) != d1

    def test_shape_sensitive(self):
        a = np.zeros(6)
        assert params_digest({"x": a.reshape(2, 3)}) != params_digest({"x": a.reshape(3, 2)})


def step_series(T=30, event=18, step=20.0, noise=0.05, seed=0):
    """Piecewise-constant truth with one co-seismic jump; prediction is
    a one-epoch-lagged copy (worst exactly at the event)."""
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 0.3, (4, 5))
    truth = np.tile(base, (T, 1, 1))
    bump = np.zeros((4, 5))
    bump[1, 2] = step
    bump[1, 3] = 0.5 * step
    truth[event:] += bump
    truth += rng.normal(0.0, noise, truth.shape)
    pred = np.concatenate([truth[:1], truth[:-1]], axis=0)
    return pred, truth


class TestEventDiagnostics:
    def test_event_location_and_pixels(self):
        pred, truth = step_series()
        diag = event_centred_diagnostics(pred, truth, window=5)
        assert diag.event_epoch == 18
        assert diag.pixels["largest_step"] == (1, 2)
        assert diag.pixels["step_edge"] == (1, 3)
        assert diag.offsets.tolist() == list(range(-5, 6))
        assert diag.epochs.tolist() == list(range(13, 24))

    def test_error_peaks_at_event(self):
        pred, truth = step_series()
        diag = event_centred_diagnostics(pred, truth, window=5)
        assert int(np.argmax(diag.mae_series)) == diag.event_epoch
        assert diag.recovery_epoch == diag.event_epoch + 1

    def test_window_clipped_at_edges(self):
        pred, truth = step_series(T=30, event=26)
        diag = event_centred_diagnostics(pred, truth, window=10)
        assert diag.event_epoch == 26
        assert diag.epochs.max() == 29
        assert diag.offsets.min() == -10

    def test_short_series_rejected(self):
        pred, truth = step_series(T=12)
        with pytest.raises(ValueError, match="too short"):
            event_centred_diagnostics(pred, truth, window=6)

    def test_curves_are_signed_errors(self):
        pred, truth = step_series()
        diag = event_centred_diagnostics(pred, truth, window=3)
        r, c = diag.pixels["largest_step"]
        err = pred - truth
        np.testing.assert_array_equal(diag.curves["largest_step"], err[diag.epochs, r, c])

    def test_csv_round_trip(self, tmp_path):
        pred, truth = step_series()
        diag = event_centred_diagnostics(pred, truth, window=4)
        p = tmp_path / "event.csv"
        write_event_csv(diag, p)
        import csv

        with open(p) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "offset"
        assert len(rows) == 1 + len(diag.offsets)
        mid = rows[1 + 4]  # offset 0 row
        assert int(mid[0]) == 0
        assert int(mid[1]) == diag.event_epoch
        assert float(mid[2]) == diag.mae_series[diag.event_epoch]


class TestImages:
    def test_pgm_bytes(self, tmp_path):
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        p = tmp_path / "img.pgm"
        write_pgm(p, gray)
        raw = p.read_bytes()
        assert raw.startswith(b"P5\n4 3\n255\n")
        assert raw[len(b"P5\n4 3\n255\n"):] == gray.tobytes()

    def test_pgm_dtype_guard(self, tmp_path):
        with pytest.raises(ValueError, match="uint8"):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)))

    def test_heatmap_export(self, tmp_path):
        pred, truth = stacks(seed=16, T=2, h=6, w=6)
        paths, sidecar = save_heatmaps(tmp_path, pred, truth)
        assert len(paths) == 2 * 3
        for p in paths:
            raw = open(p, "rb").read()
            assert raw.startswith(b"P5\n6 6\n255\n")
        text = open(sidecar).read()
        lo = float(text.split("lo_mm=")[1].splitlines()[0])
        hi = float(text.split("hi_mm=")[1].splitlines()[0])
        assert lo <= truth.min() and hi >= truth.max()

    def test_heatmap_gray_mapping(self, tmp_path):
        truth = np.zeros((1, 3, 3))
        pred = truth.copy()
        pred[0, 0, 0] = 10.0  # residual max; shared scale lo=0 hi=10
        paths, _ = save_heatmaps(tmp_path, pred, truth)
        pred_img = [p for p in paths if p.endswith("pred.pgm")][0]
        body = open(pred_img, "rb").read().split(b"255\n", 1)[1]
        gray = np.frombuffer(body, dtype=np.uint8).reshape(3, 3)
        assert gray[0, 0] == 255
        assert gray[1, 1] == 0
