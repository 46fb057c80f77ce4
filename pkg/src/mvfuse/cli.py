"""Command-line harness: simulate, fuse, train, infer, evaluate, benchmark.

BLAS/OpenMP thread pinning only works if the environment variables are set
before numpy is first imported, so this module keeps its top-level imports
to the standard library and loads the heavy modules inside the handlers.

Conventions shared by every subcommand:
  * ``--config`` names a JSON file with one object per section
    (e.g. ``{"ebmd": {"iterations": 48}}``); command-line flags override
    individual fields and unknown keys are rejected.
  * ``--out`` is required; a resolved-config echo is written to
    ``<out>/run_config.json`` before any heavy work starts, and an existing
    echo blocks the run unless ``--force`` is passed.
  * stdout carries a single JSON object mapping artifact names to paths;
    progress and diagnostics go to stderr.
  * exit codes: 0 success, 2 configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

THREADS_ENV = "MVFUSE_THREADS"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

RUN_CONFIG_NAME = "run_config.json"


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def _info(message: str):
    print(message, file=sys.stderr)


def _emit(payload: dict):
    """Write the machine-readable result object to stdout."""
    print(json.dumps(payload, sort_keys=True))


def _dims_arg(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected three comma-separated integers, got {text!r}")
    return parts


def _load_config_file(path):
    """Read the optional JSON config file into a dict."""
    from .config import ConfigError

    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _check_keys(data: dict, allowed, where: str):
    from .config import ConfigError

    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(
            f"unknown config key(s) for {where}: {', '.join(unknown)}")


def _section(data: dict, name: str) -> dict:
    from .config import ConfigError

    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def _override(section: dict, key: str, value):
    if value is not None:
        section[key] = value


def _prepare_out(args) -> Path:
    """Resolve --out, guarding against accidental overwrite."""
    from .config import ConfigError

    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    if (out / RUN_CONFIG_NAME).exists() and not args.force:
        raise FileExistsError(
            f"{out / RUN_CONFIG_NAME} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, payload: dict) -> Path:
    path = out / RUN_CONFIG_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _load_sample_views(manifest: dict, sample: dict):
    """Build a ViewSet for one manifest sample.

    Stored views are clamped at zero (float32 round-off can leave values
    like -1e-17 on noiseless data) and kernels are re-normalized to absorb
    storage rounding.
    """
    import numpy as np

    from . import io
    from .volume import Psf, ViewSet, Volume

    views = []
    for rel in sample["views"]:
        vol = io.read_volume(io.resolve(manifest, rel))
        views.append(Volume(np.clip(vol.data.astype(np.float64), 0.0, None)))
    psfs = [
        Psf.from_array(
            io.read_volume(io.resolve(manifest, rel)).data, normalize=True)
        for rel in manifest["psfs"]
    ]
    return ViewSet(views, psfs, list(sample["angles"]))


def _split_ids(manifest: dict, split: str):
    from .volume import VolumeError

    if split not in manifest["split"]:
        raise VolumeError(
            f"unknown split {split!r}; expected one of "
            f"{', '.join(sorted(manifest['split']))}")
    return list(manifest["split"][split])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    from . import config as cfgmod
    from . import phantom as ph

    data = _load_config_file(args.config)
    _check_keys(
        data,
        ("phantom", "psf", "noise", "n_views", "n_samples", "boundary",
         "dtype"),
        "simulate")

    phantom_sec = _section(data, "phantom")
    _override(phantom_sec, "kind", args.kind)
    _override(phantom_sec, "dims", args.dims)
    _override(phantom_sec, "seed", args.seed)
    noise_sec = _section(data, "noise")
    _override(noise_sec, "seed", args.seed)

    phantom_cfg = cfgmod.from_dict(ph.PhantomConfig, phantom_sec, "phantom")
    psf_cfg = cfgmod.from_dict(ph.PsfConfig, _section(data, "psf"), "psf")
    noise_cfg = cfgmod.from_dict(ph.NoiseConfig, noise_sec, "noise")

    n_views = args.n_views if args.n_views is not None else data.get("n_views", 4)
    n_samples = (args.n_samples if args.n_samples is not None
                 else data.get("n_samples", 1))
    boundary = data.get("boundary", "circular")
    dtype = args.dtype if args.dtype is not None else data.get("dtype", "f32")

    out = _prepare_out(args)
    run_config = _write_run_config(out, {
        "command": "simulate",
        "threads": args.resolved_threads,
        "phantom": cfgmod.as_dict(phantom_cfg),
        "psf": cfgmod.as_dict(psf_cfg),
        "noise": cfgmod.as_dict(noise_cfg),
        "n_views": int(n_views),
        "n_samples": int(n_samples),
        "boundary": boundary,
        "dtype": dtype,
    })

    def progress(idx, total):
        _info(f"simulate: sample {idx + 1}/{total}")

    ph.make_dataset(phantom_cfg, psf_cfg, noise_cfg, int(n_views),
                    int(n_samples), out, force=True, boundary=boundary,
                    dtype=dtype, progress=progress)
    _emit({
        "run_config": str(run_config),
        "manifest": str(out / "manifest.json"),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse (classical baselines)
# ---------------------------------------------------------------------------

def _cmd_fuse(args) -> int:
    from . import classical
    from . import config as cfgmod
    from . import io

    data = _load_config_file(args.config)
    _check_keys(data, ("cbif", "ebmd", "boundary"), "fuse")

    manifest = io.read_manifest(args.dataset)
    sample_ids = _split_ids(manifest, args.split)
    boundary = (args.boundary if args.boundary is not None
                else data.get("boundary", "circular"))

    if args.method == "cbif":
        sec = _section(data, "cbif")
        _override(sec, "window_radius", args.window_radius)
        _override(sec, "histogram_bins", args.bins)
        _override(sec, "epsilon", args.epsilon)
        method_cfg = cfgmod.from_dict(classical.CbifConfig, sec, "cbif")
    else:
        sec = _section(data, "ebmd")
        _override(sec, "iterations", args.iterations)
        _override(sec, "tikhonov_lambda", args.tikhonov)
        _override(sec, "init", args.init)
        method_cfg = cfgmod.from_dict(classical.EbmdConfig, sec, "ebmd")

    out = _prepare_out(args)
    run_config = _write_run_config(out, {
        "command": "fuse",
        "threads": args.resolved_threads,
        "dataset": str(args.dataset),
        "split": args.split,
        "method": args.method,
        "boundary": boundary,
        args.method: cfgmod.as_dict(method_cfg),
    })

    results_dir = out / args.method
    results_dir.mkdir(exist_ok=True)
    report: dict = {
        "method": args.method,
        "split": args.split,
        "samples": {},
    }
    for sid in sample_ids:
        sample = io.manifest_sample(manifest, sid)
        views = _load_sample_views(manifest, sample)
        start = time.perf_counter()
        if args.method == "cbif":
            fused = classical.cbif_fuse(views, method_cfg)
            entry = {"seconds": time.perf_counter() - start}
        else:
            residuals: list = []

            def sink(iteration, view_residuals, psi):
                residuals.append([float(r) for r in view_residuals])

            fused = classical.ebmd_deconvolve(views, method_cfg,
                                              progress_sink=sink,
                                              boundary=boundary)
            entry = {
                "seconds": time.perf_counter() - start,
                "iterations": len(residuals),
                "residuals": residuals,
            }
        io.write_volume(results_dir / f"{sid}.mvv", fused)
        report["samples"][sid] = entry
        _info(f"fuse[{args.method}] {sid}: {entry['seconds']:.2f}s")

    report_path = out / f"{args.method}_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({
        "run_config": str(run_config),
        "results": str(results_dir),
        "report": str(report_path),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    from . import config as cfgmod
    from . import io, nn

    data = _load_config_file(args.config)
    _check_keys(data, ("train", "generator", "discriminator"), "train")

    manifest = io.read_manifest(args.dataset)

    train_sec = _section(data, "train")
    _override(train_sec, "mode", args.mode)
    _override(train_sec, "epochs", args.epochs)
    _override(train_sec, "lr", args.lr)
    _override(train_sec, "batch", args.batch)
    _override(train_sec, "lambda_cycle", args.lambda_cycle)
    _override(train_sec, "lambda_gradient", args.lambda_gradient)
    _override(train_sec, "tile_dims", args.tile)
    _override(train_sec, "gt_split", args.gt_split)
    _override(train_sec, "checkpoint_every", args.checkpoint_every)
    _override(train_sec, "seed", args.seed)
    train_cfg = cfgmod.from_dict(nn.TrainConfig, train_sec, "train")

    gen_sec = _section(data, "generator")
    gen_sec.setdefault("in_channels", manifest["configs"]["n_views"])
    gen_cfg = cfgmod.from_dict(nn.GeneratorConfig, gen_sec, "generator")

    disc_cfg = None
    if train_cfg.mode == nn.MODE_SEMI or "discriminator" in data:
        disc_cfg = cfgmod.from_dict(
            nn.DiscriminatorConfig, _section(data, "discriminator"),
            "discriminator")

    out = _prepare_out(args)
    run_config = _write_run_config(out, {
        "command": "train",
        "threads": args.resolved_threads,
        "dataset": str(args.dataset),
        "train": cfgmod.as_dict(train_cfg),
        "generator": cfgmod.as_dict(gen_cfg),
        "discriminator": (cfgmod.as_dict(disc_cfg)
                          if disc_cfg is not None else None),
        "resume": str(args.resume) if args.resume else None,
    })

    def progress(epoch, row):
        _info(f"train: epoch {epoch} cycle={row['cycle']:.6g} "
              f"adv_g={row['adv_g']:.6g} wall={row['wall_time']:.1f}s")

    result = nn.train(manifest, train_cfg, gen_cfg, disc_cfg, out_dir=out,
                      resume=args.resume, progress=progress)
    _emit({
        "run_config": str(run_config),
        "params": str(result.params_path),
        "history": str(result.history_path),
        "checkpoint": str(result.checkpoint_path),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _cmd_infer(args) -> int:
    import numpy as np

    from . import io, nn

    data = _load_config_file(args.config)
    _check_keys(data, ("infer",), "infer")
    sec = _section(data, "infer")
    _check_keys(sec, ("tile_dims", "overlap", "precision"), "infer section")
    _override(sec, "tile_dims", args.tile)
    _override(sec, "overlap", args.overlap)
    _override(sec, "precision", args.precision)
    tile_dims = sec.get("tile_dims")
    if tile_dims is not None:
        tile_dims = tuple(int(v) for v in tile_dims)
    overlap = sec.get("overlap")
    if overlap is not None:
        overlap = int(overlap)
    precision = sec.get("precision", "f64")

    manifest = io.read_manifest(args.dataset)
    sample_ids = _split_ids(manifest, args.split)
    generator = nn.load_generator(args.params)

    out = _prepare_out(args)
    run_config = _write_run_config(out, {
        "command": "infer",
        "threads": args.resolved_threads,
        "dataset": str(args.dataset),
        "params": str(args.params),
        "split": args.split,
        "label": args.label,
        "tile_dims": list(tile_dims) if tile_dims is not None else None,
        "overlap": overlap,
        "precision": precision,
    })

    results_dir = out / args.label
    results_dir.mkdir(exist_ok=True)
    report: dict = {"label": args.label, "split": args.split, "samples": {}}
    for sid in sample_ids:
        sample = io.manifest_sample(manifest, sid)
        stack = np.stack([
            np.clip(io.read_volume(io.resolve(manifest, rel)).data
                    .astype(np.float64), 0.0, None)
            for rel in sample["views"]
        ])
        start = time.perf_counter()
        fused = nn.infer(generator, stack, tile_dims=tile_dims,
                         overlap=overlap, precision=precision)
        seconds = time.perf_counter() - start
        io.write_volume(results_dir / f"{sid}.mvv", fused)
        report["samples"][sid] = {"seconds": seconds}
        _info(f"infer {sid}: {seconds:.2f}s")

    report_path = out / f"{args.label}_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({
        "run_config": str(run_config),
        "results": str(results_dir),
        "report": str(report_path),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _slice_triplet(data):
    """XY/XZ/YZ center slices of a 3-d array, as 2-d arrays."""
    nx, ny, nz = data.shape
    return (data[:, :, nz // 2], data[:, ny // 2, :], data[nx // 2, :, :])


def _panel_image(volumes_by_row, lo: float, hi: float, gap: int = 2):
    """Stack per-method slice strips into one grayscale uint8 canvas.

    All rows share the same intensity window [lo, hi] so methods stay
    visually comparable.
    """
    import numpy as np

    scale = hi - lo
    if scale <= 0:
        scale = 1.0
    strips = []
    for data in volumes_by_row:
        slices = [(np.clip((s - lo) / scale, 0.0, 1.0) * 255.0).astype(np.uint8)
                  for s in _slice_triplet(data)]
        height = max(s.shape[0] for s in slices)
        width = sum(s.shape[1] for s in slices) + gap * (len(slices) - 1)
        strip = np.zeros((height, width), dtype=np.uint8)
        col = 0
        for s in slices:
            strip[:s.shape[0], col:col + s.shape[1]] = s
            col += s.shape[1] + gap
        strips.append(strip)
    height = sum(s.shape[0] for s in strips) + gap * (len(strips) - 1)
    width = max(s.shape[1] for s in strips)
    canvas = np.zeros((height, width), dtype=np.uint8)
    row = 0
    for s in strips:
        canvas[row:row + s.shape[0], :s.shape[1]] = s
        row += s.shape[0] + gap
    return canvas


def _write_panels(out: Path, manifest: dict, evaluation: dict,
                  p_low: float, p_high: float):
    """One PNG per evaluated sample: XY/XZ/YZ center slices per method.

    Rows are ground truth first, then every scored method in report order.
    The grayscale window comes from the ground truth percentiles, shared by
    all rows of a panel.
    """
    import numpy as np
    from PIL import Image

    from . import io

    panels_dir = out / "panels"
    panels_dir.mkdir(exist_ok=True)
    methods = sorted(evaluation["reports"])
    results_root = Path(evaluation["results_dir"])
    for sid in evaluation["samples"]:
        sample = io.manifest_sample(manifest, sid)
        gt = io.read_volume(io.resolve(manifest, sample["gt"])).data
        gt = gt.astype(np.float64)
        lo = float(np.percentile(gt, p_low))
        hi = float(np.percentile(gt, p_high))
        rows = [gt]
        for method in methods:
            if sid not in evaluation["reports"][method]:
                continue
            if method == "raw" and not (results_root / "raw").is_dir():
                angles = sample["angles"]
                view_idx = angles.index(0) if 0 in angles else 0
                path = io.resolve(manifest, sample["views"][view_idx])
            else:
                path = results_root / method / f"{sid}.mvv"
            rows.append(io.read_volume(path).data.astype(np.float64))
        canvas = _panel_image(rows, lo, hi)
        Image.fromarray(canvas, mode="L").save(panels_dir / f"{sid}.png")
    return panels_dir


def _cmd_evaluate(args) -> int:
    from . import io, metrics

    data = _load_config_file(args.config)
    _check_keys(data, ("evaluate",), "evaluate")
    sec = _section(data, "evaluate")
    _check_keys(sec, ("p_low", "p_high", "split", "include_raw"),
                "evaluate section")
    _override(sec, "p_low", args.p_low)
    _override(sec, "p_high", args.p_high)
    _override(sec, "split", args.split)
    if args.no_raw:
        sec["include_raw"] = False
    p_low = float(sec.get("p_low", metrics.DEFAULT_P_LOW))
    p_high = float(sec.get("p_high", metrics.DEFAULT_P_HIGH))
    split = sec.get("split", "test")
    include_raw = bool(sec.get("include_raw", True))

    manifest = io.read_manifest(args.dataset)
    evaluation = metrics.evaluate_run(args.results, manifest, p_low, p_high,
                                      split=split, include_raw=include_raw)
    evaluation["results_dir"] = str(args.results)

    out = _prepare_out(args)
    echo = {
        "command": "evaluate",
        "threads": args.resolved_threads,
        "dataset": str(args.dataset),
        "results": str(args.results),
        "split": split,
        "p_low": p_low,
        "p_high": p_high,
        "include_raw": include_raw,
    }
    run_config = _write_run_config(out, echo)

    csv_path = out / "metrics.csv"
    metrics.write_metrics_csv(csv_path, evaluation["rows"])
    json_path = out / "metrics.json"
    metrics.write_metrics_json(json_path, evaluation, config_echo=echo)
    panels_dir = _write_panels(out, manifest, evaluation, p_low, p_high)
    for path in evaluation["missing"]:
        _info(f"evaluate: missing result {path}")
    _emit({
        "run_config": str(run_config),
        "csv": str(csv_path),
        "json": str(json_path),
        "panels": str(panels_dir),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _direct_convolve(x, kernel):
    """Brute-force circular convolution by shifted accumulation."""
    import numpy as np

    out = np.zeros_like(x)
    center = tuple((k - 1) // 2 for k in kernel.shape)
    for i in range(kernel.shape[0]):
        for j in range(kernel.shape[1]):
            for l in range(kernel.shape[2]):
                w = kernel[i, j, l]
                if w == 0.0:
                    continue
                out += w * np.roll(
                    x, (i - center[0], j - center[1], l - center[2]),
                    axis=(0, 1, 2))
    return out


def _cmd_benchmark(args) -> int:
    import numpy as np

    from . import volume as vol

    data = _load_config_file(args.config)
    _check_keys(data, ("benchmark",), "benchmark")
    sec = _section(data, "benchmark")
    _check_keys(sec, ("dims", "kernel_dims", "repeats"), "benchmark section")
    _override(sec, "dims", args.dims)
    _override(sec, "kernel_dims", args.kernel)
    _override(sec, "repeats", args.repeats)
    dims = tuple(int(v) for v in sec.get("dims", (64, 64, 64)))
    kernel_dims = tuple(int(v) for v in sec.get("kernel_dims", (15, 15, 15)))
    repeats = int(sec.get("repeats", 3))

    out = _prepare_out(args)
    run_config = _write_run_config(out, {
        "command": "benchmark",
        "threads": args.resolved_threads,
        "seed": args.seed if args.seed is not None else 0,
        "dims": list(dims),
        "kernel_dims": list(kernel_dims),
        "repeats": repeats,
    })

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    x = vol.Volume(rng.random(dims))
    kernel = rng.random(kernel_dims)
    psf = vol.Psf.from_array(kernel, normalize=True)

    fft_seconds = []
    fft_result = None
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        fft_result = vol.convolve(x, psf)
        fft_seconds.append(time.perf_counter() - start)
    start = time.perf_counter()
    direct = _direct_convolve(x.data, psf.data)
    direct_seconds = time.perf_counter() - start

    checksum = hashlib.sha256(
        np.ascontiguousarray(fft_result.data).tobytes()).hexdigest()
    fft_best = min(fft_seconds)
    report = {
        "dims": list(dims),
        "kernel_dims": list(kernel_dims),
        "repeats": repeats,
        "threads": args.resolved_threads,
        "fft_seconds": fft_best,
        "direct_seconds": direct_seconds,
        "speedup": direct_seconds / fft_best if fft_best > 0 else float("inf"),
        "max_abs_difference": float(np.abs(fft_result.data - direct).max()),
        "checksum": checksum,
    }
    report_path = out / "benchmark.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _info(f"benchmark: fft {fft_best:.4f}s direct {direct_seconds:.4f}s "
          f"speedup {report['speedup']:.1f}x")
    _emit({
        "run_config": str(run_config),
        "report": str(report_path),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file; flags override its fields")
    common.add_argument("--seed", type=int, metavar="N",
                        help="random seed override")
    common.add_argument("--threads", type=int, metavar="N",
                        help=f"BLAS/OpenMP thread cap (default: "
                             f"${THREADS_ENV} if set)")
    common.add_argument("--out", metavar="DIR",
                        help="output directory (required)")
    common.add_argument("--force", action="store_true",
                        help="overwrite an existing run in --out")

    parser = argparse.ArgumentParser(
        prog="mvfuse",
        description="Multi-view volume fusion: synthetic data, classical "
                    "baselines, network training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="generate a synthetic multi-view dataset")
    p.add_argument("--kind", choices=("embryo", "nuclei"))
    p.add_argument("--dims", type=_dims_arg, metavar="X,Y,Z")
    p.add_argument("--n-views", dest="n_views", type=int, metavar="N")
    p.add_argument("--n-samples", dest="n_samples", type=int, metavar="N")
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("fuse", parents=[common],
                       help="run a classical fusion baseline over a split")
    p.add_argument("--dataset", required=True, metavar="MANIFEST")
    p.add_argument("--method", required=True, choices=("cbif", "ebmd"))
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--boundary", choices=("circular", "zero-pad"))
    p.add_argument("--iterations", type=int, metavar="N",
                   help="deconvolution sweeps (ebmd)")
    p.add_argument("--tikhonov", type=float, metavar="LAMBDA",
                   help="regularization weight (ebmd)")
    p.add_argument("--init", choices=("average-of-views", "uniform"),
                   help="initial estimate (ebmd)")
    p.add_argument("--window-radius", dest="window_radius", type=int,
                   metavar="R", help="entropy window radius (cbif)")
    p.add_argument("--bins", type=int, metavar="N",
                   help="entropy histogram bins (cbif)")
    p.add_argument("--epsilon", type=float, metavar="EPS",
                   help="weight floor (cbif)")
    p.set_defaults(handler=_cmd_fuse)

    p = sub.add_parser("train", parents=[common],
                       help="train the fusion network on a dataset")
    p.add_argument("--dataset", required=True, metavar="MANIFEST")
    p.add_argument("--mode", choices=("self", "semi"))
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--lr", type=float, metavar="LR")
    p.add_argument("--batch", type=int, metavar="N")
    p.add_argument("--lambda-cycle", dest="lambda_cycle", type=float,
                   metavar="W")
    p.add_argument("--lambda-gradient", dest="lambda_gradient", type=float,
                   metavar="W")
    p.add_argument("--tile", type=_dims_arg, metavar="X,Y,Z")
    p.add_argument("--gt-split", dest="gt_split", type=float, metavar="FRAC")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   metavar="N")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("infer", parents=[common],
                       help="fuse a split with trained network parameters")
    p.add_argument("--dataset", required=True, metavar="MANIFEST")
    p.add_argument("--params", required=True, metavar="PARAMS")
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--label", default="net", metavar="NAME",
                   help="results subdirectory name")
    p.add_argument("--tile", type=_dims_arg, metavar="X,Y,Z")
    p.add_argument("--overlap", type=int, metavar="N")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score method outputs against ground truth")
    p.add_argument("--dataset", required=True, metavar="MANIFEST")
    p.add_argument("--results", required=True, metavar="DIR",
                   help="directory with one subdirectory per method")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--p-low", dest="p_low", type=float, metavar="P")
    p.add_argument("--p-high", dest="p_high", type=float, metavar="P")
    p.add_argument("--no-raw", dest="no_raw", action="store_true",
                   help="skip the raw 0-degree view pseudo-method")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("benchmark", parents=[common],
                       help="time FFT convolution against the direct oracle")
    p.add_argument("--dims", type=_dims_arg, metavar="X,Y,Z")
    p.add_argument("--kernel", type=_dims_arg, metavar="X,Y,Z")
    p.add_argument("--repeats", type=int, metavar="N")
    p.set_defaults(handler=_cmd_benchmark)
    return parser


def _resolve_threads(args) -> int | None:
    if args.threads is not None:
        value = args.threads
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return None
        try:
            value = int(raw)
        except ValueError:
            raise SystemExit(
                f"mvfuse: error: invalid {THREADS_ENV} value {raw!r}")
    if value < 1:
        raise SystemExit("mvfuse: error: thread count must be >= 1")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _resolve_threads(args)
    except SystemExit as exc:
        code = exc.code
        if isinstance(code, str):
            _info(code)
            return EXIT_CONFIG
        return EXIT_CONFIG if code else EXIT_OK
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    args.resolved_threads = threads

    # Heavy imports happen inside the handlers, after thread pinning.
    from .config import ConfigError
    from .io import FormatError
    from .volume import VolumeError

    try:
        return args.handler(args)
    except ConfigError as exc:
        _info(f"mvfuse: config error: {exc}")
        return EXIT_CONFIG
    except FormatError as exc:
        _info(f"mvfuse: i/o error: {exc}")
        return EXIT_IO
    except VolumeError as exc:
        _info(f"mvfuse: config error: {exc}")
        return EXIT_CONFIG
    except (FileNotFoundError, FileExistsError, IsADirectoryError,
            NotADirectoryError, PermissionError) as exc:
        _info(f"mvfuse: i/o error: {exc}")
        return EXIT_IO
    except OSError as exc:
        _info(f"mvfuse: i/o error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
