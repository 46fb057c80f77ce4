"""End-to-end contracts of the command-line harness.

Every command runs in-process through ``cli.main`` so exit codes, stdout
payloads, and config echoes are asserted exactly as a shell would see them.
"""

import contextlib
import io as stdio
import json
import os
from pathlib import Path

import numpy as np
import pytest

from mvfuse import cli
from mvfuse import io as mvio

SIM_CONFIG = {
    "phantom": {"kind": "nuclei", "dims": [16, 16, 16], "n_objects": 6,
                "radius_range": [1.5, 2.5]},
    "psf": {"dims": [5, 5, 5], "sigma_lateral": 0.7, "sigma_axial": 1.4},
    "noise": {"gaussian_sigma": 0.005, "poisson_photons": 2000},
    "n_views": 2,
    "n_samples": 6,
}


def run_cli(argv):
    """Invoke the CLI in-process; returns (exit_code, stdout_json, stderr)."""
    out_buf, err_buf = stdio.StringIO(), stdio.StringIO()
    with contextlib.redirect_stdout(out_buf), contextlib.redirect_stderr(err_buf):
        code = cli.main([str(a) for a in argv])
    text = out_buf.getvalue().strip()
    payload = json.loads(text) if text else None
    return code, payload, err_buf.getvalue()


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A 6-sample 16^3 two-view dataset built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli_ds")
    config = write_config(root, SIM_CONFIG)
    out = root / "ds"
    code, payload, _ = run_cli(
        ["simulate", "--config", config, "--seed", 3, "--out", out])
    assert code == cli.EXIT_OK
    manifest_path = Path(payload["manifest"])
    return {"out": out, "manifest": manifest_path,
            "data": mvio.read_manifest(manifest_path)}


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    """A one-epoch self-mode training run used by the infer tests."""
    out = tmp_path_factory.mktemp("cli_train")
    code, payload, _ = run_cli([
        "train", "--dataset", dataset["manifest"], "--mode", "self",
        "--epochs", 1, "--lr", "1e-4", "--seed", 0, "--out", out])
    assert code == cli.EXIT_OK
    return payload


# ---------------------------------------------------------------------------
# shared flag behavior
# ---------------------------------------------------------------------------

class TestCommonFlags:
    def test_out_is_required(self, dataset):
        code, _, err = run_cli(["fuse", "--dataset", dataset["manifest"],
                                "--method", "cbif"])
        assert code == cli.EXIT_CONFIG
        assert "--out" in err

    def test_existing_run_blocks_without_force(self, dataset, tmp_path):
        args = ["benchmark", "--dims", "8,8,8", "--kernel", "3,3,3",
                "--repeats", 1, "--out", tmp_path / "b"]
        assert run_cli(args)[0] == cli.EXIT_OK
        code, _, err = run_cli(args)
        assert code == cli.EXIT_IO
        assert "--force" in err
        assert run_cli(args + ["--force"])[0] == cli.EXIT_OK

    def test_unknown_config_key_rejected(self, tmp_path):
        config = write_config(tmp_path, {"bogus": 1})
        code, _, err = run_cli(["simulate", "--config", config,
                                "--out", tmp_path / "x"])
        assert code == cli.EXIT_CONFIG
        assert "bogus" in err

    def test_invalid_json_config_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        code, _, err = run_cli(["simulate", "--config", path,
                                "--out", tmp_path / "x"])
        assert code == cli.EXIT_CONFIG
        assert "JSON" in err

    def test_malformed_dims_flag(self, tmp_path):
        code, _, _ = run_cli(["simulate", "--dims", "8,8",
                              "--out", tmp_path / "x"])
        assert code == cli.EXIT_CONFIG

    def test_missing_manifest_is_io_error(self, tmp_path):
        code, _, _ = run_cli(["fuse", "--dataset", tmp_path / "nope.json",
                              "--method", "cbif", "--out", tmp_path / "x"])
        assert code == cli.EXIT_IO

    def test_echo_written_even_when_generation_fails(self, tmp_path):
        # 60 default objects cannot fit a 16^3 nuclei volume; the resolved
        # config must still land on disk before the failure.
        config = write_config(
            tmp_path, {"phantom": {"kind": "nuclei", "dims": [16, 16, 16]}})
        out = tmp_path / "x"
        code, _, _ = run_cli(["simulate", "--config", config, "--out", out])
        assert code == cli.EXIT_CONFIG
        assert (out / "run_config.json").exists()


class TestThreadControl:
    def test_flag_pins_thread_env(self, monkeypatch, tmp_path):
        for var in cli._THREAD_VARS:
            monkeypatch.setenv(var, "sentinel")
        code, _, _ = run_cli(["benchmark", "--dims", "8,8,8",
                              "--kernel", "3,3,3", "--repeats", 1,
                              "--threads", 2, "--out", tmp_path / "b"])
        assert code == cli.EXIT_OK
        for var in cli._THREAD_VARS:
            assert os.environ[var] == "2"

    def test_env_fallback(self, monkeypatch, tmp_path):
        for var in cli._THREAD_VARS:
            monkeypatch.setenv(var, "sentinel")
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        code, payload, _ = run_cli(["benchmark", "--dims", "8,8,8",
                                    "--kernel", "3,3,3", "--repeats", 1,
                                    "--out", tmp_path / "b"])
        assert code == cli.EXIT_OK
        assert os.environ["OMP_NUM_THREADS"] == "3"
        report = json.loads(Path(payload["report"]).read_text())
        assert report["threads"] == 3

    def test_invalid_env_value(self, monkeypatch, tmp_path):
        monkeypatch.setenv(cli.THREADS_ENV, "junk")
        code, _, _ = run_cli(["benchmark", "--dims", "8,8,8",
                              "--out", tmp_path / "b"])
        assert code == cli.EXIT_CONFIG

    def test_nonpositive_flag_value(self, tmp_path):
        code, _, _ = run_cli(["benchmark", "--threads", 0,
                              "--out", tmp_path / "b"])
        assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

class TestSimulate:
    def test_manifest_and_echo(self, dataset):
        echo = json.loads((dataset["out"] / "run_config.json").read_text())
        assert echo["command"] == "simulate"
        assert echo["phantom"]["seed"] == 3
        assert echo["noise"]["gaussian_sigma"] == 0.005
        assert echo["n_views"] == 2
        manifest = dataset["data"]
        assert len(manifest["samples"]) == 6
        assert manifest["configs"]["n_views"] == 2

    def test_flag_overrides_config_file(self, tmp_path):
        config = write_config(tmp_path, SIM_CONFIG)
        out = tmp_path / "ds"
        code, _, _ = run_cli(["simulate", "--config", config,
                              "--n-samples", 1, "--seed", 9, "--out", out])
        assert code == cli.EXIT_OK
        echo = json.loads((out / "run_config.json").read_text())
        assert echo["n_samples"] == 1
        assert echo["phantom"]["seed"] == 9
        manifest = mvio.read_manifest(out / "manifest.json")
        assert len(manifest["samples"]) == 1


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------

class TestFuse:
    def test_ebmd_echoes_hyperparameters(self, dataset, tmp_path):
        out = tmp_path / "run"
        code, payload, _ = run_cli([
            "fuse", "--dataset", dataset["manifest"], "--method", "ebmd",
            "--iterations", 5, "--tikhonov", 0.1, "--split", "test",
            "--out", out])
        assert code == cli.EXIT_OK
        echo = json.loads(Path(payload["run_config"]).read_text())
        assert echo["ebmd"]["iterations"] == 5
        assert echo["ebmd"]["tikhonov_lambda"] == 0.1
        report = json.loads(Path(payload["report"]).read_text())
        test_ids = dataset["data"]["split"]["test"]
        for sid in test_ids:
            entry = report["samples"][sid]
            assert entry["iterations"] == 5
            assert len(entry["residuals"]) == 5
            assert all(len(r) == 2 for r in entry["residuals"])
            assert (Path(payload["results"]) / f"{sid}.mvv").exists()

    def test_residuals_shrink_over_iterations(self, dataset, tmp_path):
        out = tmp_path / "run"
        code, payload, _ = run_cli([
            "fuse", "--dataset", dataset["manifest"], "--method", "ebmd",
            "--iterations", 8, "--tikhonov", 0.004, "--out", out])
        assert code == cli.EXIT_OK
        report = json.loads(Path(payload["report"]).read_text())
        sid = dataset["data"]["split"]["test"][0]
        residuals = np.asarray(report["samples"][sid]["residuals"])
        assert residuals.sum(axis=1)[-1] < residuals.sum(axis=1)[0]

    def test_cbif_flags(self, dataset, tmp_path):
        out = tmp_path / "run"
        code, payload, _ = run_cli([
            "fuse", "--dataset", dataset["manifest"], "--method", "cbif",
            "--window-radius", 2, "--bins", 16, "--out", out])
        assert code == cli.EXIT_OK
        echo = json.loads(Path(payload["run_config"]).read_text())
        assert echo["cbif"]["window_radius"] == 2
        assert echo["cbif"]["histogram_bins"] == 16
        assert "ebmd" not in echo

    def test_repeat_run_byte_identical(self, dataset, tmp_path):
        args = ["fuse", "--dataset", dataset["manifest"], "--method", "ebmd",
                "--iterations", 3, "--out", tmp_path / "run"]
        assert run_cli(args)[0] == cli.EXIT_OK
        sid = dataset["data"]["split"]["test"][0]
        result = tmp_path / "run" / "ebmd" / f"{sid}.mvv"
        first = result.read_bytes()
        assert run_cli(args + ["--force"])[0] == cli.EXIT_OK
        assert result.read_bytes() == first


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

class TestTrain:
    def test_self_mode_artifacts(self, dataset, trained):
        for key in ("params", "history", "checkpoint"):
            assert Path(trained[key]).exists()
        echo = json.loads(Path(trained["run_config"]).read_text())
        assert echo["train"]["mode"] == "self"
        assert echo["train"]["lr"] == 1e-4
        assert echo["train"]["batch"] == 1
        assert echo["train"]["lambda_cycle"] == 10.0
        assert echo["generator"]["in_channels"] == 2
        history = Path(trained["history"]).read_text().splitlines()
        assert history[0] == "epoch,cycle,adv_g,grad_loss,wall_time"
        assert len(history) == 2

    def test_resume_passthrough(self, dataset, trained, tmp_path):
        code, payload, _ = run_cli([
            "train", "--dataset", dataset["manifest"], "--mode", "self",
            "--epochs", 2, "--lr", "1e-4", "--seed", 0,
            "--resume", trained["checkpoint"], "--out", tmp_path / "more"])
        assert code == cli.EXIT_OK
        history = Path(payload["history"]).read_text().splitlines()
        # resumed run reports only the continuation epoch
        assert len(history) == 2
        assert history[1].startswith("2,")

    def test_semi_with_mismatched_patch_is_config_error(self, dataset,
                                                        tmp_path):
        # default discriminator patches are 32^3/16^3, the dataset is 16^3
        code, _, err = run_cli([
            "train", "--dataset", dataset["manifest"], "--mode", "semi",
            "--epochs", 1, "--out", tmp_path / "run"])
        assert code == cli.EXIT_CONFIG

    def test_semi_smoke_with_explicit_config(self, dataset, tmp_path):
        config = write_config(tmp_path, {
            "discriminator": {"patch_dims": [[16, 16, 16], [8, 8, 8]],
                              "depth": 2, "base_channels": 2},
        })
        code, payload, _ = run_cli([
            "train", "--dataset", dataset["manifest"], "--mode", "semi",
            "--config", config, "--epochs", 1, "--seed", 0,
            "--out", tmp_path / "run"])
        assert code == cli.EXIT_OK
        history = Path(payload["history"]).read_text().splitlines()
        assert history[0] == ("epoch,cycle,adv_g,adv_d_s0,adv_d_s1,"
                              "grad_loss,wall_time")

    def test_batch_above_one_rejected(self, dataset, tmp_path):
        code, _, _ = run_cli([
            "train", "--dataset", dataset["manifest"], "--batch", 2,
            "--out", tmp_path / "run"])
        assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

class TestInfer:
    def test_writes_labelled_results(self, dataset, trained, tmp_path):
        out = tmp_path / "run"
        code, payload, _ = run_cli([
            "infer", "--dataset", dataset["manifest"],
            "--params", trained["params"], "--split", "test",
            "--label", "net", "--out", out])
        assert code == cli.EXIT_OK
        assert payload["results"].endswith("net")
        for sid in dataset["data"]["split"]["test"]:
            vol = mvio.read_volume(Path(payload["results"]) / f"{sid}.mvv")
            assert vol.data.shape == (16, 16, 16)
            assert vol.data.min() >= 0.0
        report = json.loads(Path(payload["report"]).read_text())
        assert all(v["seconds"] >= 0.0 for v in report["samples"].values())

    def test_tiled_f32_precision(self, dataset, trained, tmp_path):
        out = tmp_path / "run"
        code, payload, _ = run_cli([
            "infer", "--dataset", dataset["manifest"],
            "--params", trained["params"], "--tile", "8,8,8",
            "--overlap", 2, "--precision", "f32", "--out", out])
        assert code == cli.EXIT_OK
        sid = dataset["data"]["split"]["test"][0]
        vol = mvio.read_volume(Path(payload["results"]) / f"{sid}.mvv")
        assert vol.data.dtype == np.float32
        echo = json.loads(Path(payload["run_config"]).read_text())
        assert echo["tile_dims"] == [8, 8, 8]
        assert echo["precision"] == "f32"

    def test_bad_tile_is_config_error(self, dataset, trained, tmp_path):
        code, _, _ = run_cli([
            "infer", "--dataset", dataset["manifest"],
            "--params", trained["params"], "--tile", "6,6,6",
            "--out", tmp_path / "run"])
        assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fused_results(dataset, tmp_path_factory):
    """CBIF and EBMD results for the test split, under one results root."""
    out = tmp_path_factory.mktemp("cli_results") / "run"
    for method, extra in (("cbif", []), ("ebmd", ["--iterations", 4])):
        code, _, _ = run_cli(
            ["fuse", "--dataset", dataset["manifest"], "--method", method,
             "--out", out, "--force"] + extra)
        assert code == cli.EXIT_OK
    return out


class TestEvaluate:
    def test_tables_and_panels(self, dataset, fused_results, tmp_path):
        from PIL import Image

        out = tmp_path / "eval"
        code, payload, _ = run_cli([
            "evaluate", "--dataset", dataset["manifest"],
            "--results", fused_results, "--split", "test", "--out", out])
        assert code == cli.EXIT_OK
        rows = Path(payload["csv"]).read_text().splitlines()
        assert rows[0] == "sample_id,method,metric,scope,value"
        methods = {line.split(",")[1] for line in rows[1:]}
        assert methods == {"raw", "cbif", "ebmd"}
        table = json.loads(Path(payload["json"]).read_text())
        assert set(table["mean"]) == {"raw", "cbif", "ebmd"}
        for sid in dataset["data"]["split"]["test"]:
            panel = Path(payload["panels"]) / f"{sid}.png"
            image = Image.open(panel)
            # one row per method plus ground truth, three slices wide
            assert image.mode == "L"
            assert image.size == (16 * 3 + 2 * 2, 16 * 4 + 2 * 3)

    def test_no_raw_flag(self, dataset, fused_results, tmp_path):
        out = tmp_path / "eval"
        code, payload, _ = run_cli([
            "evaluate", "--dataset", dataset["manifest"],
            "--results", fused_results, "--no-raw", "--out", out])
        assert code == cli.EXIT_OK
        table = json.loads(Path(payload["json"]).read_text())
        assert set(table["mean"]) == {"cbif", "ebmd"}

    def test_metrics_csv_deterministic(self, dataset, fused_results,
                                       tmp_path):
        args = ["evaluate", "--dataset", dataset["manifest"],
                "--results", fused_results, "--out", tmp_path / "eval"]
        assert run_cli(args)[0] == cli.EXIT_OK
        first = (tmp_path / "eval" / "metrics.csv").read_bytes()
        assert run_cli(args + ["--force"])[0] == cli.EXIT_OK
        assert (tmp_path / "eval" / "metrics.csv").read_bytes() == first

    def test_empty_results_dir_is_io_error(self, dataset, tmp_path):
        (tmp_path / "results").mkdir()
        code, _, _ = run_cli([
            "evaluate", "--dataset", dataset["manifest"], "--no-raw",
            "--results", tmp_path / "results", "--out", tmp_path / "eval"])
        assert code == cli.EXIT_IO


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

class TestBenchmark:
    def test_report_fields(self, tmp_path):
        code, payload, _ = run_cli([
            "benchmark", "--dims", "16,16,16", "--kernel", "5,5,5",
            "--repeats", 2, "--out", tmp_path / "b"])
        assert code == cli.EXIT_OK
        report = json.loads(Path(payload["report"]).read_text())
        assert report["fft_seconds"] >= 0.0
        assert report["direct_seconds"] >= 0.0
        assert report["speedup"] > 0.0
        # FFT result must agree with the shift-and-add oracle
        assert report["max_abs_difference"] < 1e-10

    def test_checksum_independent_of_threads(self, tmp_path):
        checksums = []
        for i, threads in enumerate((1, 2)):
            code, payload, _ = run_cli([
                "benchmark", "--dims", "16,16,16", "--kernel", "5,5,5",
                "--repeats", 1, "--threads", threads,
                "--out", tmp_path / f"b{i}"])
            assert code == cli.EXIT_OK
            report = json.loads(Path(payload["report"]).read_text())
            checksums.append(report["checksum"])
        assert checksums[0] == checksums[1]
