"""Tests for normalization, the four quality metrics, and run evaluation."""

import csv
import json
import math

import numpy as np
import pytest

import oracles
from mvfuse import io
from mvfuse.metrics import (
    MetricReport,
    cc,
    evaluate_report,
    evaluate_run,
    foreground_mask,
    nrmse,
    percentile_normalize,
    psnr,
    ssim,
    ssim_map,
    write_metrics_csv,
    write_metrics_json,
)
from mvfuse.phantom import NoiseConfig, PhantomConfig, PsfConfig, make_dataset
from mvfuse.volume import Volume, VolumeError


# ---------------------------------------------------------------------------
# percentile normalization
# ---------------------------------------------------------------------------

class TestPercentileNormalize:
    def test_unit_ramp_unchanged(self):
        ramp = np.linspace(0.0, 1.0, 64).reshape(4, 4, 4)
        out = percentile_normalize(Volume(ramp), 0.0, 100.0)
        np.testing.assert_allclose(out.data, ramp, atol=1e-15)

    def test_affine_invariance(self, rng):
        v = rng.random((6, 6, 6))
        a = percentile_normalize(Volume(v))
        b = percentile_normalize(Volume(3.7 * v + 11.0))
        np.testing.assert_allclose(b.data, a.data, atol=1e-9)

    def test_matches_sort_interpolate_oracle(self, rng):
        v = rng.random((10, 10, 10))
        out = percentile_normalize(Volume(v), 0.1, 99.9)
        lo = oracles.percentile_direct(v, 0.1)
        hi = oracles.percentile_direct(v, 99.9)
        np.testing.assert_allclose(out.data, (v - lo) / (hi - lo), atol=1e-12)

    def test_not_clipped(self, rng):
        v = rng.random((10, 10, 10))
        out = percentile_normalize(Volume(v), 10.0, 90.0)
        assert out.data.min() < 0.0 and out.data.max() > 1.0

    def test_constant_volume_degenerate(self):
        with pytest.raises(VolumeError, match="degenerate normalization"):
            percentile_normalize(Volume(np.full((4, 4, 4), 2.0)))

    def test_invalid_percentile_order(self, rng):
        v = Volume(rng.random((4, 4, 4)))
        with pytest.raises(VolumeError):
            percentile_normalize(v, 50.0, 50.0)
        with pytest.raises(VolumeError):
            percentile_normalize(v, -1.0, 99.0)
        with pytest.raises(VolumeError):
            percentile_normalize(v, 1.0, 101.0)


class TestForegroundMask:
    def test_all_zero_empty(self):
        assert foreground_mask(Volume(np.zeros((4, 4, 4)))).sum() == 0

    def test_all_positive_full(self, rng):
        assert foreground_mask(Volume(rng.random((4, 4, 4)) + 0.5)).all()

    def test_half_zero_count(self):
        v = np.zeros((4, 4, 4))
        v[:2] = 1.0
        assert foreground_mask(Volume(v)).sum() == 32


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

class TestScalarMetrics:
    def test_identical_inputs_perfect_scores(self, rng):
        g = rng.random((8, 8, 8))
        assert nrmse(g, g) == 0.0
        assert psnr(g, g) == math.inf
        assert cc(g, g) == 1.0
        assert ssim(g, g) == 1.0

    def test_shifted_binary_analytic(self, rng):
        g = (rng.random((8, 8, 8)) > 0.5).astype(np.float64)
        r = g + 0.1
        assert nrmse(r, g) == pytest.approx(0.1, abs=1e-12)
        assert psnr(r, g) == pytest.approx(20.0, abs=1e-12)
        assert cc(r, g) == pytest.approx(1.0, abs=1e-12)

    def test_match_oracles_random_pairs(self, rng):
        for _ in range(20):
            g = rng.random((16, 16, 16))
            r = g + 0.1 * rng.standard_normal((16, 16, 16))
            assert nrmse(r, g) == pytest.approx(oracles.nrmse_direct(r, g), abs=1e-12)
            assert psnr(r, g) == pytest.approx(oracles.psnr_direct(r, g), abs=1e-12)
            assert cc(r, g) == pytest.approx(oracles.pearson_direct(r, g), abs=1e-12)

    def test_ssim_matches_direct_windowed_sums(self, rng):
        g = rng.random((12, 12, 12))
        r = g + 0.05 * rng.standard_normal((12, 12, 12))
        data_range = float(g.max() - g.min())
        expect_map = oracles.ssim_map_direct(r, g, data_range)
        got_map = ssim_map(r, g, data_range)
        np.testing.assert_allclose(got_map, expect_map, atol=1e-9)
        assert ssim(r, g) == pytest.approx(float(expect_map.mean()), abs=1e-9)

    def test_masked_variants_match_oracles(self, rng):
        g = np.where(rng.random((12, 12, 12)) > 0.4, rng.random((12, 12, 12)), 0.0)
        r = np.abs(g + 0.1 * rng.standard_normal((12, 12, 12)))
        mask = g > 0
        assert nrmse(r, g, mask) == pytest.approx(oracles.nrmse_direct(r, g, mask), abs=1e-12)
        assert psnr(r, g, mask) == pytest.approx(oracles.psnr_direct(r, g, mask), abs=1e-12)
        assert cc(r, g, mask) == pytest.approx(oracles.pearson_direct(r, g, mask), abs=1e-12)
        data_range = float(g.max() - g.min())
        expect = float(oracles.ssim_map_direct(r, g, data_range)[mask].mean())
        assert ssim(r, g, mask) == pytest.approx(expect, abs=1e-9)

    def test_full_mask_equals_unmasked_exactly(self, rng):
        g = rng.random((8, 8, 8))
        r = g + 0.02 * rng.standard_normal((8, 8, 8))
        full = np.ones((8, 8, 8), dtype=bool)
        assert nrmse(r, g, full) == nrmse(r, g)
        assert psnr(r, g, full) == psnr(r, g)
        assert cc(r, g, full) == cc(r, g)
        assert ssim(r, g, full) == ssim(r, g)

    def test_ssim_symmetric_with_shared_range(self, rng):
        a = rng.random((8, 8, 8))
        b = rng.random((8, 8, 8))
        assert abs(ssim(a, b, data_range=1.0) - ssim(b, a, data_range=1.0)) <= 1e-12

    def test_empty_mask_rejected(self, rng):
        g = rng.random((4, 4, 4))
        empty = np.zeros((4, 4, 4), dtype=bool)
        for fn in (nrmse, psnr, cc, ssim):
            with pytest.raises(VolumeError, match="empty"):
                fn(g, g, empty)

    def test_zero_variance_cc_rejected(self, rng):
        g = rng.random((4, 4, 4))
        with pytest.raises(VolumeError, match="variance"):
            cc(np.full((4, 4, 4), 0.5), g)
        with pytest.raises(VolumeError, match="variance"):
            cc(g, np.full((4, 4, 4), 0.5))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(VolumeError):
            nrmse(rng.random((4, 4, 4)), rng.random((4, 4, 5)))

    def test_zero_range_gt_rejected(self, rng):
        r = rng.random((4, 4, 4))
        with pytest.raises(VolumeError):
            nrmse(r, np.full((4, 4, 4), 1.0))
        with pytest.raises(VolumeError):
            ssim(r, np.full((4, 4, 4), 1.0))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

class TestEvaluateReport:
    def test_affine_invariance_of_full_protocol(self, rng):
        gt = np.where(rng.random((10, 10, 10)) > 0.5, rng.random((10, 10, 10)), 0.0)
        result = np.abs(gt + 0.05 * rng.standard_normal((10, 10, 10)))
        base = evaluate_report(result, gt)
        scaled = evaluate_report(4.2 * result + 3.0, gt)
        for metric in ("nrmse", "psnr", "ssim", "cc"):
            for i in (0, 1):
                assert getattr(scaled, metric)[i] == pytest.approx(
                    getattr(base, metric)[i], abs=1e-9)

    def test_report_fields(self, rng):
        gt = np.where(rng.random((10, 10, 10)) > 0.5, rng.random((10, 10, 10)), 0.0)
        result = np.abs(gt + 0.05 * rng.standard_normal((10, 10, 10)))
        report = evaluate_report(result, gt, 0.1, 99.9)
        assert report.normalization == (0.1, 99.9)
        assert 0 < report.foreground_count < 1000
        assert -1.0 <= report.cc[0] <= 1.0
        assert report.nrmse[0] >= 0.0
        rows = report.rows("s0001", "ebmd")
        assert len(rows) == 8
        assert rows[0] == ("s0001", "ebmd", "nrmse", "all", report.nrmse[0])
        assert rows[1][3] == "fg"


# ---------------------------------------------------------------------------
# run evaluation and table output
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def eval_dataset(tmp_path_factory):
    """Noise-free nuclei dataset with a 2-sample test split plus results."""
    root = tmp_path_factory.mktemp("eval")
    phantom = PhantomConfig(kind="nuclei", dims=(16, 16, 16), n_objects=4,
                            radius_range=(1.5, 2.5), intensity_range=(0.5, 1.0),
                            seed=13)
    psf = PsfConfig(dims=(5, 5, 5), sigma_lateral=0.8, sigma_axial=1.4)
    manifest = make_dataset(phantom, psf, NoiseConfig(0.0, 0.0, 0), n_views=2,
                            n_samples=10, out_dir=root / "data")
    results = root / "results"
    (results / "gt_copy").mkdir(parents=True)
    (results / "partial").mkdir()
    test_ids = manifest["split"]["test"]
    for sid in test_ids:
        sample = io.manifest_sample(manifest, sid)
        gt = io.read_volume(io.resolve(manifest, sample["gt"]))
        io.write_volume(results / "gt_copy" / f"{sid}.mvv", gt)
    first = io.manifest_sample(manifest, test_ids[0])
    io.write_volume(results / "partial" / f"{test_ids[0]}.mvv",
                    io.read_volume(io.resolve(manifest, first["views"][0])))
    return manifest, results


class TestEvaluateRun:
    def test_gt_copy_is_perfect(self, eval_dataset):
        manifest, results = eval_dataset
        out = evaluate_run(results, manifest)
        for sid, report in out["reports"]["gt_copy"].items():
            assert report.nrmse == (0.0, 0.0)
            assert report.psnr == (math.inf, math.inf)
            assert report.ssim == (1.0, 1.0)
            assert report.cc == (1.0, 1.0)

    def test_raw_method_included_and_worse(self, eval_dataset):
        manifest, results = eval_dataset
        out = evaluate_run(results, manifest)
        assert set(out["reports"]) == {"raw", "gt_copy", "partial"}
        for sid, report in out["reports"]["raw"].items():
            assert report.psnr[0] < math.inf
            assert report.nrmse[0] > 0.0

    def test_missing_sample_warned_not_fatal(self, eval_dataset):
        manifest, results = eval_dataset
        out = evaluate_run(results, manifest)
        test_ids = manifest["split"]["test"]
        assert len(test_ids) == 2
        assert len(out["reports"]["partial"]) == 1
        assert any("partial" in m for m in out["missing"])

    def test_mean_rows_present(self, eval_dataset):
        manifest, results = eval_dataset
        out = evaluate_run(results, manifest)
        mean_rows = [r for r in out["rows"] if r[0] == "mean"]
        assert len(mean_rows) == 8 * 3
        assert "gt_copy" in out["mean"]
        assert out["mean"]["gt_copy"].ssim == (1.0, 1.0)

    def test_zero_evaluable_fails(self, eval_dataset, tmp_path):
        manifest, _ = eval_dataset
        with pytest.raises(FileNotFoundError):
            evaluate_run(tmp_path / "nothing", manifest, include_raw=False)

    def test_unknown_split_rejected(self, eval_dataset):
        manifest, results = eval_dataset
        with pytest.raises(VolumeError):
            evaluate_run(results, manifest, split="holdout")


class TestTableOutput:
    def test_csv_round_trip(self, eval_dataset, tmp_path):
        manifest, results = eval_dataset
        out = evaluate_run(results, manifest)
        csv_path = tmp_path / "metrics.csv"
        write_metrics_csv(csv_path, out["rows"])
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["sample_id", "method", "metric", "scope", "value"]
        assert len(rows) == 1 + len(out["rows"])
        assert float(rows[1][4]) >= 0.0
        inf_rows = [r for r in rows if r[4] == "inf"]
        assert inf_rows, "psnr sentinel should serialize as inf"

    def test_json_mirror(self, eval_dataset, tmp_path):
        manifest, results = eval_dataset
        out = evaluate_run(results, manifest)
        json_path = tmp_path / "metrics.json"
        write_metrics_json(json_path, out, {"p_low": 0.1, "p_high": 99.9})
        with open(json_path) as fh:
            payload = json.load(fh)
        assert payload["config"] == {"p_low": 0.1, "p_high": 99.9}
        assert payload["mean"]["gt_copy"]["psnr"] == ["inf", "inf"]
        assert set(payload["per_sample"]) == {"raw", "gt_copy", "partial"}

    def test_csv_deterministic(self, eval_dataset, tmp_path):
        manifest, results = eval_dataset
        for name in ("a.csv", "b.csv"):
            write_metrics_csv(tmp_path / name,
                              evaluate_run(results, manifest)["rows"])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
