"""Wasserstein critic objective with gradient penalty and drift regularizer.

The critic maximizes its score gap between real and generated batches; the
penalty pulls the gradient norm toward 1 along random interpolates between the
two, and a small drift term keeps raw scores from wandering.  The generator
just maximizes the critic's score on its samples.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import Tensor

__all__ = [
    "gradient_penalty",
    "discriminator_loss",
    "generator_loss",
]

GP_WEIGHT_DEFAULT = 10.0
DRIFT_WEIGHT_DEFAULT = 1e-3

Critic = Callable[[Tensor], Tensor]


def interpolate(real: Tensor, fake: Tensor, u: Tensor) -> Tensor:
    """Per-sample convex mix u * real + (1 - u) * fake."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} must match")
    if u.shape != (real.shape[0],) + (1,) * (real.ndim - 1):
        raise ValueError(f"u must broadcast per sample, got {tuple(u.shape)}")
    return u * real + (1.0 - u) * fake


def gradient_penalty(
    critic: Critic,
    real: Tensor,
    fake: Tensor,
    u: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Mean squared distance of the interpolate gradient norm from 1.

    ``critic`` maps a batch of images to a batch of scores.  The graph through
    the gradient is kept so the penalty itself can be trained on; grad mode is
    forced on internally so the penalty also works under no_grad callers.
    """
    if u is None:
        u = torch.rand((real.shape[0],) + (1,) * (real.ndim - 1), generator=generator)
    with torch.enable_grad():
        x_hat = interpolate(real.detach(), fake.detach(), u).requires_grad_(True)
        scores = critic(x_hat)
        if scores.shape != (real.shape[0],):
            raise ValueError(f"critic must return one score per sample, got {tuple(scores.shape)}")
        if scores.requires_grad:
            (grads,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
        else:
            # critic ignores its input; the interpolate gradient is identically zero
            grads = torch.zeros_like(x_hat)
    if not torch.isfinite(grads).all():
        raise ValueError("non-finite gradients on the interpolates")
    norms = grads.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def discriminator_loss(
    critic: Critic,
    real: Tensor,
    fake: Tensor,
    gp_weight: float = GP_WEIGHT_DEFAULT,
    drift_weight: float = DRIFT_WEIGHT_DEFAULT,
    u: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Critic objective; returns the scalar loss and its logged parts."""
    d_real = critic(real)
    d_fake = critic(fake)
    wasserstein = d_fake.mean() - d_real.mean()
    gp = gradient_penalty(critic, real, fake, u=u, generator=generator)
    drift = d_real.pow(2).mean()
    loss = wasserstein + gp_weight * gp + drift_weight * drift
    parts = {
        "d_real": d_real.mean().item(),
        "d_fake": d_fake.mean().item(),
        "wasserstein": wasserstein.item(),
        "gp": gp.item(),
        "drift": drift.item(),
    }
    return loss, parts


def generator_loss(critic: Critic, fake: Tensor) -> Tensor:
    """Negated critic score on generated samples."""
    return -critic(fake).mean()
