"""Training losses and their hand-derived gradients.

The L1 terms use the mean of absolute residuals with the subgradient at zero
defined as 0, so a residual of exactly zero contributes no gradient.  The
degradation head inside the cycle loss is the fixed forward model, so its
backward pass is correlation with the same kernel (the exact adjoint provided
by the convolution core).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..volume import BOUNDARY_CIRCULAR, FftConvolver, Psf


def _spatial(arr: np.ndarray) -> np.ndarray:
    """Accept (1, nx, ny, nz) or (nx, ny, nz); return the 3D view."""

    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single channel, got shape {arr.shape}")
        return arr[0]
    if arr.ndim == 3:
        return arr
    raise ValueError(f"expected a 3D or (1, ...) 4D array, got shape {arr.shape}")


def l1_mean(residual: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute value and its (sub)gradient w.r.t. the residual."""

    loss = float(np.abs(residual).mean())
    grad = np.sign(residual) / residual.size
    return loss, grad


def cycle_term(
    gen_out: np.ndarray,
    convolvers: Sequence[FftConvolver],
    views: Sequence[np.ndarray],
) -> tuple[float, np.ndarray]:
    """Mean over views of mean-|blurred output - view|, with gradient.

    The gradient w.r.t. the generator output applies the adjoint of each
    view's blur (correlation with the same PSF) to the residual signs.
    """

    if len(convolvers) != len(views):
        raise ValueError(
            f"{len(convolvers)} convolvers for {len(views)} views"
        )
    if not views:
        raise ValueError("cycle term needs at least one view")
    z = _spatial(gen_out)
    n_views = len(views)
    loss = 0.0
    grad = np.zeros_like(z)
    for conv, view in zip(convolvers, views):
        residual = conv.convolve(z) - view
        term, g_res = l1_mean(residual)
        loss += term
        grad += conv.correlate(g_res)
    loss /= n_views
    grad /= n_views
    return loss, grad.reshape(gen_out.shape)


def cycle_loss(
    gen_out: np.ndarray,
    psfs: Sequence[Psf],
    views: Sequence[np.ndarray],
    gt_roundtrip: tuple[np.ndarray, np.ndarray] | None = None,
    boundary: str = BOUNDARY_CIRCULAR,
) -> float:
    """Cycle-consistency loss value.

    First term: each candidate latent is pushed through every view's forward
    blur and compared with that view in the L1 sense, averaged over views.
    ``gt_roundtrip=(gen_z, z)`` adds the second path used in adversarial
    training: a reference volume degraded to views, refused by the generator,
    and compared with itself.
    """

    z = _spatial(gen_out)
    convolvers = [FftConvolver(psf, z.shape, boundary) for psf in psfs]
    loss, _ = cycle_term(gen_out, convolvers, views)
    if gt_roundtrip is not None:
        gen_z, ref = gt_roundtrip
        term, _ = l1_mean(_spatial(gen_z) - _spatial(ref))
        loss += term
    return float(loss)


def gradient_loss(z_hat: np.ndarray) -> float:
    """Mean squared forward difference, summed over axes.

    Differences are one-sided; the final plane along each axis has no forward
    neighbour and contributes no term, so axis a averages over
    (n_a - 1) * prod(other dims) entries.
    """

    loss, _ = gradient_loss_with_grad(z_hat)
    return loss


def gradient_loss_with_grad(z_hat: np.ndarray) -> tuple[float, np.ndarray]:
    z = _spatial(z_hat)
    loss = 0.0
    grad = np.zeros_like(z)
    for axis in range(3):
        d = np.diff(z, axis=axis)
        n = d.size
        loss += float((d * d).sum() / n)
        scaled = (2.0 / n) * d
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        grad[tuple(head)] -= scaled
        grad[tuple(tail)] += scaled
    return loss, grad.reshape(z_hat.shape)


def _scale_scores(scores) -> list[np.ndarray]:
    return [np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in scores]


def lsgan_discriminator_loss(scores_real, scores_fake) -> float:
    """Least-squares critic loss, summed over scales.

    Per scale: 0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2); real patches are
    pushed toward score 1 and generated ones toward 0.
    """

    loss, _, _ = lsgan_discriminator_grads(scores_real, scores_fake)
    return loss


def lsgan_discriminator_grads(scores_real, scores_fake):
    real = _scale_scores(scores_real)
    fake = _scale_scores(scores_fake)
    if len(real) != len(fake):
        raise ValueError(
            f"{len(real)} real score groups for {len(fake)} fake groups"
        )
    loss = 0.0
    grads_real = []
    grads_fake = []
    for r, f in zip(real, fake):
        loss += 0.5 * float(((r - 1.0) ** 2).mean()) + 0.5 * float((f ** 2).mean())
        grads_real.append((r - 1.0) / r.size)
        grads_fake.append(f / f.size)
    return loss, grads_real, grads_fake


def lsgan_generator_loss(scores_fake) -> float:
    """Least-squares generator loss: mean((fake - 1)^2) summed over scales."""

    loss, _ = lsgan_generator_grads(scores_fake)
    return loss


def lsgan_generator_grads(scores_fake):
    fake = _scale_scores(scores_fake)
    loss = 0.0
    grads = []
    for f in fake:
        loss += float(((f - 1.0) ** 2).mean())
        grads.append(2.0 * (f - 1.0) / f.size)
    return loss, grads


def total_generator_objective(
    cfg,
    adversarial: float = 0.0,
    cycle: float = 0.0,
    gradient: float = 0.0,
) -> float:
    """Combine the generator's loss parts per training mode.

    Semi mode: adversarial + lambda_cycle * cycle.  Self mode has no critic
    and adds the smoothness term instead: lambda_cycle * cycle +
    lambda_gradient * gradient.
    """

    total = cfg.lambda_cycle * cycle
    if cfg.mode == "semi":
        total += adversarial
    else:
        total += cfg.lambda_gradient * gradient
    return float(total)
