"""Progressive generator and discriminator pairs with optional attention stages.

Both networks are built from a shared stage list: stage 0 works at 4x4 and each
later stage doubles the resolution.  During growth the newest stage is blended
in with a fade coefficient; the blend is always computed, so a stabilized stage
(alpha = 1) takes the same code path as a fading one and the endpoints reduce
exactly to the single-path outputs.

Attention goes in symmetric positions: the generator runs it right after the
upsample of a stage, the discriminator right before the downsample of the same
stage, so both operate on the same resolution and channel width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .layers import (
    EqualizedConv2d,
    EqualizedLinear,
    SNLBlock,
    downsample2x,
    minibatch_stddev,
    pixel_norm,
    upsample2x,
)

__all__ = [
    "StageSpec",
    "NetworkSpec",
    "FadeState",
    "LatentCode",
    "fade_blend",
    "one_hot",
    "sample_latents",
    "Generator",
    "Discriminator",
]

MIN_RESOLUTION = 4
MAX_RESOLUTION = 256
LRELU_SLOPE = 0.2

ATTENTION_PLACEMENTS = ("both", "generator", "discriminator")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class StageSpec:
    """One growth stage: output resolution, channel width, attention flag."""

    resolution: int
    channels: int
    has_attention: bool = False

    def __post_init__(self) -> None:
        if not (
            _is_power_of_two(self.resolution)
            and MIN_RESOLUTION <= self.resolution <= MAX_RESOLUTION
        ):
            raise ValueError(
                f"resolution must be a power of two in [{MIN_RESOLUTION}, {MAX_RESOLUTION}], "
                f"got {self.resolution}"
            )
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")


def stage_channels(resolution: int, base_channels: int = 128, channel_floor: int = 16) -> int:
    """Halve the base width at every doubling, with a floor."""
    return max(channel_floor, base_channels >> int(math.log2(resolution // MIN_RESOLUTION)))


@dataclass(frozen=True)
class NetworkSpec:
    """Stage list plus the latent/conditioning interface shared by G and D."""

    stages: tuple[StageSpec, ...]
    latent_dim: int = 64
    n_classes: int = 7
    attention_in: str = "both"

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("at least one stage is required")
        if self.stages[0].resolution != MIN_RESOLUTION:
            raise ValueError(f"first stage must be {MIN_RESOLUTION}x{MIN_RESOLUTION}")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.resolution != 2 * prev.resolution:
                raise ValueError(
                    f"stage resolutions must double: {prev.resolution} -> {cur.resolution}"
                )
        if self.stages[0].has_attention:
            raise ValueError("attention at the base resolution is not supported")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.attention_in not in ATTENTION_PLACEMENTS:
            raise ValueError(
                f"attention_in must be one of {ATTENTION_PLACEMENTS}, got {self.attention_in!r}"
            )

    @property
    def max_resolution(self) -> int:
        return self.stages[-1].resolution

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def attention_resolutions(self) -> tuple[int, ...]:
        return tuple(s.resolution for s in self.stages if s.has_attention)

    def stage_for_resolution(self, resolution: int) -> int:
        for i, s in enumerate(self.stages):
            if s.resolution == resolution:
                return i
        raise ValueError(f"no stage with resolution {resolution}")

    @classmethod
    def build(
        cls,
        max_resolution: int = 32,
        latent_dim: int = 64,
        n_classes: int = 7,
        base_channels: int = 128,
        channel_floor: int = 16,
        attention_stages: tuple[int, ...] = (),
        attention_in: str = "both",
    ) -> "NetworkSpec":
        if not (
            _is_power_of_two(max_resolution)
            and MIN_RESOLUTION <= max_resolution <= MAX_RESOLUTION
        ):
            raise ValueError(f"max_resolution must be a power of two in [4, 256], got {max_resolution}")
        resolutions = []
        r = MIN_RESOLUTION
        while r <= max_resolution:
            resolutions.append(r)
            r *= 2
        for a in attention_stages:
            if a not in resolutions:
                raise ValueError(f"attention resolution {a} is not a stage of a {max_resolution}px network")
            if a == MIN_RESOLUTION:
                raise ValueError("attention at the base resolution is not supported")
        stages = tuple(
            StageSpec(
                resolution=res,
                channels=stage_channels(res, base_channels, channel_floor),
                has_attention=res in attention_stages,
            )
            for res in resolutions
        )
        return cls(
            stages=stages, latent_dim=latent_dim, n_classes=n_classes, attention_in=attention_in
        )

    def describe(self) -> str:
        lines = [
            f"{self.n_stages} stages to {self.max_resolution}x{self.max_resolution}, "
            f"latent {self.latent_dim}, {self.n_classes} classes, attention in {self.attention_in}"
        ]
        for i, s in enumerate(self.stages):
            tag = "  +attention" if s.has_attention else ""
            lines.append(f"  stage {i}: {s.resolution:>3}x{s.resolution:<3} {s.channels:>4} ch{tag}")
        return "\n".join(lines)


@dataclass(frozen=True)
class FadeState:
    """Where training sits in the growth schedule: active stage and blend weight."""

    stage_index: int
    alpha: float

    def __post_init__(self) -> None:
        if self.stage_index < 0:
            raise ValueError(f"stage_index must be >= 0, got {self.stage_index}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class LatentCode:
    """One generator input: a latent vector and a class label."""

    z: Tensor
    label: int

    def __post_init__(self) -> None:
        if self.z.ndim != 1:
            raise ValueError(f"z must be a vector, got shape {tuple(self.z.shape)}")
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")


def fade_blend(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    """(1 - alpha) * a + alpha * b, the growth crossfade.

    Computed unconditionally; at alpha 0 or 1 the multiplies by zero make the
    result equal to the surviving branch.
    """
    return (1.0 - alpha) * a + alpha * b


def one_hot(labels: Tensor, n_classes: int) -> Tensor:
    if labels.ndim != 1:
        raise ValueError(f"labels must be a vector, got shape {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"labels must be in [0, {n_classes - 1}], got range "
            f"[{labels.min().item()}, {labels.max().item()}]"
        )
    return nn.functional.one_hot(labels.long(), n_classes).float()


def sample_latents(
    n: int, latent_dim: int, n_classes: int, generator: torch.Generator | None = None
) -> tuple[Tensor, Tensor]:
    """Standard-normal latents and uniform class labels."""
    z = torch.randn(n, latent_dim, generator=generator)
    labels = torch.randint(0, n_classes, (n,), generator=generator)
    return z, labels


def _act(x: Tensor) -> Tensor:
    return nn.functional.leaky_relu(x, LRELU_SLOPE)


class GeneratorBlock(nn.Module):
    """Upsample, optional attention, then two normalized convolutions."""

    def __init__(self, in_channels: int, out_channels: int, with_attention: bool):
        super().__init__()
        self.attention = SNLBlock(in_channels) if with_attention else None
        self.conv1 = EqualizedConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = EqualizedConv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        x = upsample2x(x)
        if self.attention is not None:
            x = self.attention(x)
        x = pixel_norm(_act(self.conv1(x)))
        x = pixel_norm(_act(self.conv2(x)))
        return x


class Generator(nn.Module):
    """Class-conditional progressive generator."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        use_attention = spec.attention_in in ("both", "generator")
        c0 = spec.stages[0].channels
        self.input = EqualizedLinear(spec.latent_dim + spec.n_classes, c0 * MIN_RESOLUTION**2)
        self.base_conv = EqualizedConv2d(c0, c0, 3, padding=1)
        self.blocks = nn.ModuleList(
            GeneratorBlock(
                prev.channels, cur.channels, with_attention=use_attention and cur.has_attention
            )
            for prev, cur in zip(spec.stages, spec.stages[1:])
        )
        self.to_rgb = nn.ModuleList(EqualizedConv2d(s.channels, 3, 1) for s in spec.stages)

    @property
    def attention_resolutions(self) -> tuple[int, ...]:
        return tuple(
            self.spec.stages[i + 1].resolution
            for i, b in enumerate(self.blocks)
            if b.attention is not None
        )

    def _check_fade(self, fade: FadeState) -> None:
        if fade.stage_index >= self.spec.n_stages:
            raise ValueError(
                f"fade stage {fade.stage_index} out of range for {self.spec.n_stages} stages"
            )
        if fade.stage_index == 0 and fade.alpha != 1.0:
            raise ValueError("the base stage has nothing to fade from; alpha must be 1")

    def forward(self, z: Tensor, labels: Tensor, fade: FadeState) -> Tensor:
        self._check_fade(fade)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ValueError(
                f"z must be [N, {self.spec.latent_dim}], got {tuple(z.shape)}"
            )
        cond = one_hot(labels, self.spec.n_classes)
        h = pixel_norm(torch.cat([z, cond], dim=1))
        h = self.input(h).reshape(-1, self.spec.stages[0].channels, MIN_RESOLUTION, MIN_RESOLUTION)
        h = pixel_norm(_act(h))
        h = pixel_norm(_act(self.base_conv(h)))
        s = fade.stage_index
        if s == 0:
            return self.to_rgb[0](h)
        for i in range(s - 1):
            h = self.blocks[i](h)
        h_prev = h
        h = self.blocks[s - 1](h)
        rgb_prev = upsample2x(self.to_rgb[s - 1](h_prev))
        rgb_new = self.to_rgb[s](h)
        return fade_blend(rgb_prev, rgb_new, fade.alpha)

    def generate(self, code: LatentCode, fade: FadeState) -> Tensor:
        """Single-sample convenience wrapper; returns [3, R, R]."""
        z = code.z.unsqueeze(0)
        labels = torch.tensor([code.label])
        with torch.no_grad():
            return self.forward(z, labels, fade)[0]


class DiscriminatorBlock(nn.Module):
    """Two convolutions, optional attention, then a downsample."""

    def __init__(self, in_channels: int, out_channels: int, with_attention: bool):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = EqualizedConv2d(in_channels, out_channels, 3, padding=1)
        self.attention = SNLBlock(out_channels) if with_attention else None

    def forward(self, x: Tensor) -> Tensor:
        x = _act(self.conv1(x))
        x = _act(self.conv2(x))
        if self.attention is not None:
            x = self.attention(x)
        return downsample2x(x)


class Discriminator(nn.Module):
    """Class-conditional critic; the label enters as constant input channels."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        use_attention = spec.attention_in in ("both", "discriminator")
        in_ch = 3 + spec.n_classes
        self.from_rgb = nn.ModuleList(EqualizedConv2d(in_ch, s.channels, 1) for s in spec.stages)
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(
                cur.channels, prev.channels, with_attention=use_attention and cur.has_attention
            )
            for prev, cur in zip(spec.stages, spec.stages[1:])
        )
        c0 = spec.stages[0].channels
        self.final_conv = EqualizedConv2d(c0 + 1, c0, 3, padding=1)
        self.final_dense = EqualizedLinear(c0 * MIN_RESOLUTION**2, c0)
        self.score = EqualizedLinear(c0, 1)

    @property
    def attention_resolutions(self) -> tuple[int, ...]:
        return tuple(
            self.spec.stages[i + 1].resolution
            for i, b in enumerate(self.blocks)
            if b.attention is not None
        )

    def _conditioned(self, img: Tensor, cond: Tensor) -> Tensor:
        maps = cond[:, :, None, None].expand(-1, -1, img.shape[-2], img.shape[-1])
        return torch.cat([img, maps], dim=1)

    def forward(self, img: Tensor, labels: Tensor, fade: FadeState) -> Tensor:
        if fade.stage_index >= self.spec.n_stages:
            raise ValueError(
                f"fade stage {fade.stage_index} out of range for {self.spec.n_stages} stages"
            )
        if fade.stage_index == 0 and fade.alpha != 1.0:
            raise ValueError("the base stage has nothing to fade from; alpha must be 1")
        s = fade.stage_index
        expected = self.spec.stages[s].resolution
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[-2:] != (expected, expected):
            raise ValueError(
                f"expected images [N, 3, {expected}, {expected}] for stage {s}, "
                f"got {tuple(img.shape)}"
            )
        cond = one_hot(labels, self.spec.n_classes)
        h = _act(self.from_rgb[s](self._conditioned(img, cond)))
        if s > 0:
            h = self.blocks[s - 1](h)
            skip = _act(self.from_rgb[s - 1](self._conditioned(downsample2x(img), cond)))
            h = fade_blend(skip, h, fade.alpha)
            for i in range(s - 2, -1, -1):
                h = self.blocks[i](h)
        h = minibatch_stddev(h)
        h = _act(self.final_conv(h))
        h = _act(self.final_dense(h.flatten(1)))
        return self.score(h).squeeze(1)


def build_pair(spec: NetworkSpec) -> tuple[Generator, Discriminator]:
    return Generator(spec), Discriminator(spec)
