"""Training loops for the fusion generator.

Two modes:

- ``self``: no reference volumes at all.  Each step blurs the generator
  output back through every view's PSF and penalizes the L1 mismatch with the
  raw views (cycle loss) plus a mean-squared-gradient smoothness term.  The
  loader audit (``TrainResult.opened_files``) proves no ground-truth file of
  an input sample is ever opened.
- ``semi``: the training split is partitioned into an input half and an
  unpaired reference half (``gt_split`` fraction, taken from the end of the
  split in manifest order).  Multi-scale least-squares patch critics push
  generator outputs toward the reference intensity statistics; the cycle loss
  gains a second path where a reference volume is degraded to views, refused,
  and compared with itself.  Critic and generator alternate one step each.

Batch size is fixed at 1 (one tile per step). Inputs are clamped to >= 0 at
load time, matching the classical fusion pipeline.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io as mvio
from ..config import ConfigError, as_dict
from ..volume import BOUNDARY_CIRCULAR, FftConvolver, VolumeError
from . import losses
from .discriminator import (
    DiscriminatorConfig,
    MultiScaleDiscriminator,
    embed_patch_grad,
)
from .generator import GeneratorConfig, UNet3D
from .optim import Adam

MODE_SELF = "self"
MODE_SEMI = "semi"

# Default training tiles (spatial dims; the channel count comes from the
# view count): isotropic for embryo-style volumes, elongated for the
# anisotropic nuclei stacks.
DESK_EMBRYO_TILE = (32, 32, 32)
DESK_NUCLEI_TILE = (8, 32, 128)

CHECKPOINT_NAME = "checkpoint.mvv"
PARAMS_NAME = "params.mvv"
HISTORY_NAME = "history.csv"


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (non-finite loss, bad setup)."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule; defaults echo the published regime
    (batch 1, learning rate 1e-4, cycle weight 10, Adam)."""

    mode: str = MODE_SELF
    epochs: int = 30
    lr: float = 1e-4
    batch: int = 1
    lambda_cycle: float = 10.0
    lambda_gradient: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tile_dims: tuple | None = None
    seed: int = 0
    gt_split: float = 0.5
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.mode not in (MODE_SELF, MODE_SEMI):
            raise ConfigError(f"mode must be 'self' or 'semi', got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch != 1:
            raise ConfigError(
                f"only batch size 1 is supported, got {self.batch}"
            )
        if self.lambda_cycle < 0:
            raise ConfigError(f"lambda_cycle must be >= 0, got {self.lambda_cycle}")
        if self.lambda_gradient < 0:
            raise ConfigError(
                f"lambda_gradient must be >= 0, got {self.lambda_gradient}"
            )
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.tile_dims is not None:
            dims = tuple(int(v) for v in self.tile_dims)
            if len(dims) != 3 or any(v < 1 for v in dims):
                raise ConfigError(f"invalid tile_dims {self.tile_dims}")
            object.__setattr__(self, "tile_dims", dims)
        if not 0.0 < self.gt_split < 1.0:
            raise ConfigError(f"gt_split must be in (0, 1), got {self.gt_split}")
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"checkpoint_every must be >= 0, got {self.checkpoint_every}"
            )


@dataclass
class TrainResult:
    generator: UNet3D
    discriminators: MultiScaleDiscriminator | None
    history: list[dict]
    opened_files: list[str] = field(default_factory=list)
    params_path: Path | None = None
    history_path: Path | None = None
    checkpoint_path: Path | None = None


class _AuditedLoader:
    """Reads dataset volumes, logging every opened relpath."""

    def __init__(self, manifest: dict):
        self.manifest = manifest
        self.opened: list[str] = []

    def volume(self, relpath: str) -> np.ndarray:
        self.opened.append(relpath)
        vol = mvio.read_volume(mvio.resolve(self.manifest, relpath))
        # Noise-free views may carry FFT round-off below zero; clamp like the
        # classical pipeline does.
        return np.clip(vol.data.astype(np.float64, copy=False), 0.0, None)

    def view_stack(self, sample: dict) -> np.ndarray:
        return np.stack([self.volume(rel) for rel in sample["views"]])


def _partition_train_ids(train_ids: list, gt_split: float) -> tuple[list, list]:
    """Split the training ids into (input half, reference half)."""

    n_gt = int(round(len(train_ids) * gt_split))
    if n_gt < 1 or n_gt >= len(train_ids):
        raise ConfigError(
            f"gt_split {gt_split} leaves an empty half for "
            f"{len(train_ids)} training samples"
        )
    return list(train_ids[: len(train_ids) - n_gt]), list(train_ids[len(train_ids) - n_gt:])


def _tile_slices(dims, tile, rng) -> tuple:
    if tile == tuple(dims):
        offsets = (0, 0, 0)
    else:
        offsets = tuple(int(rng.integers(0, n - t + 1)) for n, t in zip(dims, tile))
    return tuple(slice(o, o + t) for o, t in zip(offsets, tile))


def _history_columns(n_scales: int) -> list[str]:
    cols = ["epoch", "cycle", "adv_g"]
    cols += [f"adv_d_s{j}" for j in range(n_scales)]
    cols += ["grad_loss", "wall_time"]
    return cols


def write_history_csv(path, history: list[dict], n_scales: int) -> None:
    cols = _history_columns(n_scales)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def _checkpoint_entries(gen, disc, adam_g, adam_d):
    entries = [(f"gen/{name}", arr) for name, arr in gen.params()]
    if disc is not None:
        entries += [(f"disc/{name}", arr) for name, arr in disc.params()]
    entries += adam_g.state_entries("adam_g")
    if adam_d is not None:
        entries += adam_d.state_entries("adam_d")
    return entries


def save_params(path, gen: UNet3D, extra: dict | None = None) -> None:
    """Write final generator parameters with their config in the header."""

    header = {"generator_config": as_dict(gen.cfg)}
    header.update(extra or {})
    entries = [(f"gen/{name}", arr) for name, arr in gen.params()]
    mvio.write_netparams(path, entries, header)


def load_generator(path) -> UNet3D:
    """Rebuild a generator from a params or checkpoint file."""

    entries, header = mvio.read_netparams(path)
    cfg_dict = header.get("generator_config")
    if cfg_dict is None:
        raise VolumeError(f"{path}: missing generator_config header")
    from ..config import from_dict

    cfg = from_dict(GeneratorConfig, cfg_dict, where="generator_config")
    gen = UNet3D(cfg, rng=None)
    gen.load_params(
        [(name[len("gen/"):], arr) for name, arr in entries
         if name.startswith("gen/") and not name.startswith("gen/adam")]
    )
    return gen


def train(
    manifest,
    train_cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig | None = None,
    out_dir=None,
    resume=None,
    progress=None,
) -> TrainResult:
    """Run the full schedule; returns nets, per-epoch history and the audit.

    ``out_dir`` (optional) receives ``params.mvv``, ``history.csv`` and a
    rolling ``checkpoint.mvv`` capturing optimizer state and the RNG, from
    which ``resume`` continues bit-exactly.  ``progress(epoch, row)`` is
    called after each epoch.
    """

    if isinstance(manifest, (str, Path)):
        manifest = mvio.read_manifest(manifest)
    loader = _AuditedLoader(manifest)
    configs = manifest["configs"]
    n_views = int(configs["n_views"])
    boundary = configs.get("boundary", BOUNDARY_CIRCULAR)
    if gen_cfg.in_channels != n_views:
        raise ConfigError(
            f"generator expects {gen_cfg.in_channels} input channels but the "
            f"dataset has {n_views} views"
        )
    if gen_cfg.out_channels != 1:
        raise ConfigError("fusion generator must emit a single channel")

    sample_ids = list(manifest["split"].get("train", []))
    if not sample_ids:
        raise ConfigError("manifest has no training samples")
    samples = {sid: mvio.manifest_sample(manifest, sid) for sid in sample_ids}

    first = loader.view_stack(samples[sample_ids[0]])
    vol_dims = first.shape[1:]
    tile = train_cfg.tile_dims or tuple(vol_dims)
    if any(t > n for t, n in zip(tile, vol_dims)):
        raise ConfigError(f"tile_dims {tile} exceed volume dims {tuple(vol_dims)}")

    psfs = [mvio.read_psf(mvio.resolve(manifest, rel)) for rel in manifest["psfs"]]
    if len(psfs) != n_views:
        raise ConfigError(f"{len(psfs)} PSFs for {n_views} views")
    convolvers = [FftConvolver(psf, tile, boundary) for psf in psfs]

    rng = np.random.default_rng(train_cfg.seed)
    gen = UNet3D(gen_cfg, rng)
    gen.validate_dims(tile)

    disc = None
    adam_d = None
    input_ids = sample_ids
    gt_ids: list = []
    if train_cfg.mode == MODE_SEMI:
        if disc_cfg is None:
            raise ConfigError("semi mode requires a discriminator config")
        if tuple(disc_cfg.patch_dims[0]) != tuple(tile):
            raise ConfigError(
                f"scale-0 patch dims {disc_cfg.patch_dims[0]} must equal the "
                f"training tile {tile}"
            )
        for j, pd in enumerate(disc_cfg.patch_dims):
            if any(p > t for p, t in zip(pd, tile)):
                raise ConfigError(
                    f"scale-{j} patch dims {pd} exceed the tile {tile}"
                )
        disc = MultiScaleDiscriminator(disc_cfg, rng)
        adam_d = Adam(
            disc.params(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2,
            train_cfg.eps,
        )
        input_ids, gt_ids = _partition_train_ids(sample_ids, train_cfg.gt_split)

    adam_g = Adam(
        gen.params(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2,
        train_cfg.eps,
    )

    epoch_start = 0
    if resume is not None:
        entries, header = mvio.read_netparams(resume)
        table = dict(entries)
        gen.load_params(
            [(name[len("gen/"):], arr) for name, arr in entries
             if name.startswith("gen/")]
        )
        if disc is not None:
            disc.load_params(
                [(name[len("disc/"):], arr) for name, arr in entries
                 if name.startswith("disc/")]
            )
        adam_g.load_state("adam_g", table, header["adam_t_g"])
        if adam_d is not None:
            adam_d.load_state("adam_d", table, header["adam_t_d"])
        rng.bit_generator.state = header["rng_state"]
        epoch_start = int(header["epoch"])

    n_scales = disc.n_scales if disc is not None else 0
    history: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(epoch_start + 1, train_cfg.epochs + 1):
        tic = time.perf_counter()
        order = [input_ids[i] for i in rng.permutation(len(input_ids))]
        sums = {"cycle": 0.0, "adv_g": 0.0, "grad_loss": 0.0}
        d_sums = [0.0] * n_scales
        for step, sid in enumerate(order, start=1):
            stack = loader.view_stack(samples[sid])
            sl = _tile_slices(vol_dims, tile, rng)
            x = stack[(slice(None), *sl)]
            views = [x[v] for v in range(n_views)]

            if train_cfg.mode == MODE_SELF:
                zhat = gen.forward(x, record=True)
                cyc, g_cyc = losses.cycle_term(zhat, convolvers, views)
                grad_val, g_grad = losses.gradient_loss_with_grad(zhat)
                total = losses.total_generator_objective(
                    train_cfg, cycle=cyc, gradient=grad_val
                )
                if not np.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}"
                    )
                gen.zero_grad()
                gen.backward(
                    train_cfg.lambda_cycle * g_cyc
                    + train_cfg.lambda_gradient * g_grad
                )
                adam_g.step(gen.grads())
                sums["cycle"] += cyc
                sums["grad_loss"] += grad_val
                continue

            # Semi mode: one critic step, then one generator step.
            gt_sid = gt_ids[int(rng.integers(0, len(gt_ids)))]
            ref_full = loader.volume(samples[gt_sid]["gt"])
            ref_sl = _tile_slices(vol_dims, tile, rng)
            ref = ref_full[ref_sl][None]

            zhat = gen.forward(x, record=False)
            disc.zero_grad()
            d_losses = []
            for j, scale in enumerate(disc.scales):
                real_patch, _ = disc.crop(ref, j, rng)
                fake_patch, _ = disc.crop(zhat, j, rng)
                s_real = scale.forward(real_patch, record=True)
                scale.backward(s_real - 1.0)
                s_fake = scale.forward(fake_patch, record=True)
                scale.backward(s_fake)
                d_losses.append(
                    0.5 * (s_real - 1.0) ** 2 + 0.5 * s_fake ** 2
                )
            if not np.isfinite(sum(d_losses)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}"
                )
            adam_d.step(
                [(name, g) for scale in disc.scales for name, g in scale.grads()]
            )

            zhat = gen.forward(x, record=True)
            gen.zero_grad()
            dz = np.zeros_like(zhat)
            adv_g = 0.0
            for j, scale in enumerate(disc.scales):
                fake_patch, offs = disc.crop(zhat, j, rng)
                s_fake = scale.forward(fake_patch, record=True)
                adv_g += (s_fake - 1.0) ** 2
                g_patch = scale.backward(2.0 * (s_fake - 1.0))
                dz += embed_patch_grad(zhat.shape, offs, g_patch)
            cyc_x, g_cyc = losses.cycle_term(zhat, convolvers, views)
            gen.backward(dz + train_cfg.lambda_cycle * g_cyc)

            ref_views = np.stack([conv.convolve(ref[0]) for conv in convolvers])
            ref_rt = gen.forward(ref_views, record=True)
            cyc_z, g_res = losses.l1_mean(ref_rt - ref)
            gen.backward(train_cfg.lambda_cycle * g_res)

            cycle_val = cyc_x + cyc_z
            total = losses.total_generator_objective(
                train_cfg, adversarial=adv_g, cycle=cycle_val
            )
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}"
                )
            adam_g.step(gen.grads())
            sums["cycle"] += cycle_val
            sums["adv_g"] += adv_g
            for j, dl in enumerate(d_losses):
                d_sums[j] += dl

        n_steps = max(len(order), 1)
        row = {
            "epoch": epoch,
            "cycle": sums["cycle"] / n_steps,
            "adv_g": sums["adv_g"] / n_steps,
            "grad_loss": sums["grad_loss"] / n_steps,
            "wall_time": time.perf_counter() - tic,
        }
        for j in range(n_scales):
            row[f"adv_d_s{j}"] = d_sums[j] / n_steps
        history.append(row)
        if progress is not None:
            progress(epoch, row)

        if out_dir is not None and train_cfg.checkpoint_every:
            if epoch % train_cfg.checkpoint_every == 0 or epoch == train_cfg.epochs:
                header = {
                    "epoch": epoch,
                    "seed": train_cfg.seed,
                    "adam_t_g": adam_g.t,
                    "adam_t_d": adam_d.t if adam_d is not None else 0,
                    "rng_state": rng.bit_generator.state,
                    "generator_config": as_dict(gen_cfg),
                    "train_config": as_dict(train_cfg),
                }
                if disc_cfg is not None:
                    header["discriminator_config"] = as_dict(disc_cfg)
                mvio.write_netparams(
                    out_dir / CHECKPOINT_NAME,
                    _checkpoint_entries(gen, disc, adam_g, adam_d),
                    header,
                )

    result = TrainResult(
        generator=gen,
        discriminators=disc,
        history=history,
        opened_files=loader.opened,
    )
    if out_dir is not None:
        result.params_path = out_dir / PARAMS_NAME
        save_params(
            result.params_path, gen,
            {"seed": train_cfg.seed, "epoch": train_cfg.epochs,
             "train_config": as_dict(train_cfg)},
        )
        result.history_path = out_dir / HISTORY_NAME
        write_history_csv(result.history_path, history, n_scales)
        if train_cfg.checkpoint_every:
            result.checkpoint_path = out_dir / CHECKPOINT_NAME
    return result
