"""Global-context attention blocks over spatial feature maps.

Two flavours live here:

* the full pairwise block, which pools a separate attention-weighted context
  vector for every query position (cost quadratic in the position count), and
* the simplified block, which computes a single global softmax over positions
  and shares the pooled context across all queries (cost linear).

Both are pure functions of a ``[C, H, W]`` feature map and a parameter bundle,
and both add their context residually, so zeroing the output transform turns
them into the identity.  ``snl_forward_naive`` keeps the per-position loop with
the value transform inside the sum; it exists as an oracle for the factored
``snl_forward``, which pools first and transforms once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch
from torch import Tensor

__all__ = [
    "FeatureMap",
    "AttentionParams",
    "NLParams",
    "AttentionMap",
    "as_feature_map",
    "stable_softmax",
    "snl_attention_weights",
    "snl_forward_naive",
    "snl_forward",
    "nl_attention_weights",
    "nl_forward",
]

_WEIGHT_SUM_TOL = 1e-6


def require_finite(name: str, t: Tensor) -> None:
    """Reject NaN/Inf inputs with a message naming the offending tensor."""
    if not torch.isfinite(t).all():
        raise ValueError(f"non-finite values in tensor '{name}'")


@dataclass(frozen=True)
class FeatureMap:
    """A ``[C, H, W]`` feature map with a flattened view of H*W positions."""

    data: Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be [C, H, W], got shape {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ValueError(f"feature map dimensions must be >= 1, got {tuple(self.data.shape)}")
        require_finite("feature_map", self.data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_positions(self) -> int:
        return self.data.shape[1] * self.data.shape[2]

    @property
    def positions(self) -> Tensor:
        """Flattened ``[N_p, C]`` view, one row per spatial position."""
        return self.data.reshape(self.channels, self.n_positions).T


FeatureMapLike = Union[FeatureMap, Tensor]


def as_feature_map(x: FeatureMapLike) -> FeatureMap:
    if isinstance(x, FeatureMap):
        return x
    return FeatureMap(x)


@dataclass(frozen=True)
class AttentionParams:
    """Parameters of the simplified block: a C->1 logit map and a C->C value map."""

    w_k: Tensor  # [1, C]
    w_v: Tensor  # [C, C]
    b_k: Tensor | None = None  # [1]
    b_v: Tensor | None = None  # [C]

    def __post_init__(self) -> None:
        if self.w_k.ndim != 2 or self.w_k.shape[0] != 1:
            raise ValueError(f"w_k must be [1, C], got {tuple(self.w_k.shape)}")
        c = self.w_k.shape[1]
        if self.w_v.shape != (c, c):
            raise ValueError(f"w_v must be [C, C] with C={c}, got {tuple(self.w_v.shape)}")
        require_finite("w_k", self.w_k)
        require_finite("w_v", self.w_v)
        if self.b_k is not None:
            require_finite("b_k", self.b_k)
        if self.b_v is not None:
            require_finite("b_v", self.b_v)

    @property
    def channels(self) -> int:
        return self.w_k.shape[1]

    @classmethod
    def initialize(
        cls,
        channels: int,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "AttentionParams":
        """Equalized-scale random logit map, zero value map (block starts as identity)."""
        scale = (2.0 / channels) ** 0.5
        w_k = torch.randn(1, channels, generator=generator, dtype=dtype) * scale
        w_v = torch.zeros(channels, channels, dtype=dtype)
        return cls(w_k=w_k, w_v=w_v)


@dataclass(frozen=True)
class NLParams:
    """Parameters of the full pairwise block with embedded-Gaussian similarity."""

    theta: Tensor  # [C_embed, C] query embedding
    phi: Tensor  # [C_embed, C] key embedding
    w_v: Tensor  # [C, C] value transform
    w_z: Tensor  # [C, C] output transform

    def __post_init__(self) -> None:
        if self.theta.ndim != 2:
            raise ValueError(f"theta must be [C_embed, C], got {tuple(self.theta.shape)}")
        c_embed, c = self.theta.shape
        if c_embed < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.phi.shape != (c_embed, c):
            raise ValueError(f"phi must match theta shape {(c_embed, c)}, got {tuple(self.phi.shape)}")
        if self.w_v.shape != (c, c):
            raise ValueError(f"w_v must be [C, C] with C={c}, got {tuple(self.w_v.shape)}")
        if self.w_z.shape != (c, c):
            raise ValueError(f"w_z must be [C, C] with C={c}, got {tuple(self.w_z.shape)}")
        for name in ("theta", "phi", "w_v", "w_z"):
            require_finite(name, getattr(self, name))

    @property
    def channels(self) -> int:
        return self.theta.shape[1]

    @property
    def embed_channels(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def initialize(
        cls,
        channels: int,
        embed_channels: int | None = None,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "NLParams":
        """Random embeddings and value map, zero output map (identity at insertion).

        Only w_z starts at zero: with both w_v and w_z zero every parameter
        gradient through the block would vanish (each factor multiplies the
        other), freezing the block at identity.
        """
        if embed_channels is None:
            embed_channels = max(1, channels // 8)
        scale = (2.0 / channels) ** 0.5
        theta = torch.randn(embed_channels, channels, generator=generator, dtype=dtype) * scale
        phi = torch.randn(embed_channels, channels, generator=generator, dtype=dtype) * scale
        w_v = torch.randn(channels, channels, generator=generator, dtype=dtype) * scale
        w_z = torch.zeros(channels, channels, dtype=dtype)
        return cls(theta=theta, phi=phi, w_v=w_v, w_z=w_z)


@dataclass(frozen=True)
class AttentionMap:
    """Normalized attention weights: a global ``[N_p]`` vector, or ``[N_p, N_p]`` rows."""

    weights: Tensor

    def __post_init__(self) -> None:
        if self.weights.ndim not in (1, 2):
            raise ValueError(f"attention weights must be rank 1 or 2, got {tuple(self.weights.shape)}")
        w = self.weights.detach()
        if (w < 0).any():
            raise ValueError("attention weights must be nonnegative")
        sums = w.sum(dim=-1)
        if (sums - 1.0).abs().max().item() > _WEIGHT_SUM_TOL:
            raise ValueError(
                f"attention weight rows must sum to 1 within {_WEIGHT_SUM_TOL}, got max deviation "
                f"{(sums - 1.0).abs().max().item():.3e}"
            )

    @property
    def is_global(self) -> bool:
        return self.weights.ndim == 1


def stable_softmax(logits: Tensor, dim: int = -1) -> Tensor:
    """Softmax with the max logit subtracted before exponentiation."""
    shifted = logits - logits.max(dim=dim, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def _check_snl_shapes(x: FeatureMap, p: AttentionParams) -> None:
    if p.channels != x.channels:
        raise ValueError(
            f"parameter channel count {p.channels} does not match feature map channels {x.channels}"
        )


def snl_attention_weights(x: FeatureMapLike, p: AttentionParams) -> AttentionMap:
    """Global position weights: softmax over positions of the scalar logit map."""
    x = as_feature_map(x)
    _check_snl_shapes(x, p)
    logits = (x.positions @ p.w_k.T).squeeze(-1)  # [N_p]
    if p.b_k is not None:
        logits = logits + p.b_k
    return AttentionMap(stable_softmax(logits, dim=-1))


def snl_forward_naive(x: FeatureMapLike, p: AttentionParams) -> FeatureMap:
    """Simplified block with the value transform applied inside the position sum.

    Explicit per-position loop, slow on purpose: this is the oracle the
    factored ``snl_forward`` is checked against.
    """
    x = as_feature_map(x)
    _check_snl_shapes(x, p)
    weights = snl_attention_weights(x, p).weights
    pos = x.positions  # [N_p, C]
    n = x.n_positions
    context = torch.zeros_like(pos[0])
    for j in range(n):
        value_j = p.w_v @ pos[j]
        if p.b_v is not None:
            value_j = value_j + p.b_v
        context = context + weights[j] * value_j
    out = pos + context.unsqueeze(0)
    return FeatureMap(out.T.reshape(x.data.shape))


def snl_forward(x: FeatureMapLike, p: AttentionParams) -> FeatureMap:
    """Factored simplified block: pool positions first, transform the pool once."""
    x = as_feature_map(x)
    _check_snl_shapes(x, p)
    weights = snl_attention_weights(x, p).weights
    pos = x.positions
    pooled = weights @ pos  # [C]
    context = p.w_v @ pooled
    if p.b_v is not None:
        context = context + p.b_v
    out = pos + context.unsqueeze(0)
    return FeatureMap(out.T.reshape(x.data.shape))


def _check_nl_shapes(x: FeatureMap, p: NLParams) -> None:
    if p.channels != x.channels:
        raise ValueError(
            f"parameter channel count {p.channels} does not match feature map channels {x.channels}"
        )


def nl_attention_weights(x: FeatureMapLike, p: NLParams) -> AttentionMap:
    """Per-query attention rows from the embedded-Gaussian similarity."""
    x = as_feature_map(x)
    _check_nl_shapes(x, p)
    pos = x.positions
    q = pos @ p.theta.T  # [N_p, C_embed]
    k = pos @ p.phi.T
    logits = q @ k.T  # [N_p, N_p], row i = query i
    return AttentionMap(stable_softmax(logits, dim=-1))


def nl_forward(x: FeatureMapLike, p: NLParams) -> FeatureMap:
    """Full pairwise block: per-query pooled values, passed through the output map."""
    x = as_feature_map(x)
    _check_nl_shapes(x, p)
    weights = nl_attention_weights(x, p).weights  # [N_p, N_p]
    pos = x.positions
    values = pos @ p.w_v.T  # [N_p, C]
    pooled = weights @ values  # [N_p, C]
    out = pos + pooled @ p.w_z.T
    return FeatureMap(out.T.reshape(x.data.shape))
