"""Building blocks shared by the generator and discriminator.

Everything here follows the progressive-growing recipe: weights are stored at
unit variance and rescaled at runtime (equalized learning rate), feature maps
are renormalized per position, and the discriminator gets a cross-batch
statistic appended as an extra channel.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

__all__ = [
    "pixel_norm",
    "equalized_scale",
    "EqualizedConv2d",
    "EqualizedLinear",
    "minibatch_stddev",
    "upsample2x",
    "downsample2x",
    "SNLBlock",
]

PIXEL_NORM_EPS = 1e-8
STDDEV_EPS = 1e-8


def pixel_norm(x: Tensor, eps: float = PIXEL_NORM_EPS) -> Tensor:
    """Scale each position to unit RMS across channels.

    For ndim >= 3 the channel axis is -3 ([..., C, H, W]); for 1D/2D inputs
    the last axis is treated as channels, which covers latent vectors.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    dim = -3 if x.ndim >= 3 else -1
    return x * torch.rsqrt(x.pow(2).mean(dim=dim, keepdim=True) + eps)


def equalized_scale(fan_in: int) -> float:
    """He-style runtime multiplier sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return math.sqrt(2.0 / fan_in)


class EqualizedConv2d(nn.Module):
    """Conv2d with unit-variance stored weights scaled by sqrt(2/fan_in) at call time."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        padding: int = 0,
        bias: bool = True,
        init: str = "normal",
    ):
        super().__init__()
        if init not in ("normal", "zeros"):
            raise ValueError(f"init must be 'normal' or 'zeros', got {init!r}")
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        w = torch.zeros(shape) if init == "zeros" else torch.randn(shape)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.scale = equalized_scale(in_channels * kernel_size * kernel_size)
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return nn.functional.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqualizedLinear(nn.Module):
    """Linear layer with the same runtime-rescaling scheme as EqualizedConv2d."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, init: str = "normal"):
        super().__init__()
        if init not in ("normal", "zeros"):
            raise ValueError(f"init must be 'normal' or 'zeros', got {init!r}")
        shape = (out_features, in_features)
        w = torch.zeros(shape) if init == "zeros" else torch.randn(shape)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.scale = equalized_scale(in_features)

    def forward(self, x: Tensor) -> Tensor:
        return nn.functional.linear(x, self.weight * self.scale, self.bias)


def minibatch_stddev(x: Tensor, eps: float = STDDEV_EPS) -> Tensor:
    """Append one channel holding the batch-averaged per-feature stddev.

    Population standard deviation over the batch axis, averaged over channels
    and positions, broadcast to [N, 1, H, W] and concatenated.  Requires a
    4D input.
    """
    if x.ndim != 4:
        raise ValueError(f"expected [N, C, H, W], got shape {tuple(x.shape)}")
    var = x.var(dim=0, unbiased=False)
    stat = (var + eps).sqrt().mean()
    channel = stat.expand(x.shape[0], 1, x.shape[2], x.shape[3])
    return torch.cat([x, channel], dim=1)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor doubling of the last two axes."""
    return x.repeat_interleave(2, dim=-1).repeat_interleave(2, dim=-2)


def downsample2x(x: Tensor) -> Tensor:
    """Average-pool 2x2 blocks; exact inverse of upsample2x on its image."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    shape = x.shape[:-2] + (h // 2, 2, w // 2, 2)
    return x.reshape(shape).mean(dim=(-3, -1))


class SNLBlock(nn.Module):
    """Residual attention over all positions with one shared weight vector.

    The logit projection collapses channels to a single score per position,
    a softmax over positions turns scores into one distribution shared by all
    outputs, and the value projection is applied once to the pooled feature.
    Cost is linear in the number of positions.  The value projection starts
    at zero so a fresh block is the identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.logit_proj = EqualizedConv2d(channels, 1, 1, bias=False)
        self.value_proj = EqualizedConv2d(channels, channels, 1, bias=False, init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        logits = self.logit_proj(x).reshape(n, h * w)
        weights = torch.softmax(logits, dim=1)
        pooled = torch.einsum("np,ncp->nc", weights, x.reshape(n, c, h * w))
        context = self.value_proj(pooled.reshape(n, c, 1, 1))
        return x + context
