"""Finite-difference verification of analytic gradients.

Central differences in double precision against torch autograd, for a scalar
loss defined as the sum of an operation's outputs.  The comparison covers both
the input feature map and every parameter tensor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor

from .attention import (
    AttentionParams,
    FeatureMapLike,
    NLParams,
    as_feature_map,
    nl_forward,
    snl_forward,
    snl_forward_naive,
)
from .layers import minibatch_stddev, pixel_norm

__all__ = [
    "GradReport",
    "UnsupportedOperationError",
    "finite_difference_gradients",
    "compare_gradients",
    "check_gradients",
    "CHECKABLE_OPS",
]

DEFAULT_STEP = 1e-5

# Elementwise denominator floor: keeps finite-difference noise from blowing up
# the ratio where both gradients are tiny, while still flagging real mismatches.
_DENOM_FLOOR = 1e-3


class UnsupportedOperationError(ValueError):
    """Raised for operation ids the checker cannot differentiate."""


@dataclass
class GradReport:
    """Outcome of one analytic-vs-numeric gradient comparison."""

    operation: str
    step: float
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "operation": self.operation,
                "step": self.step,
                "max_rel_error": self.max_rel_error,
                "per_tensor": self.per_tensor,
            },
            sort_keys=True,
        )


def finite_difference_gradients(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    tensors: dict[str, Tensor],
    step: float = DEFAULT_STEP,
) -> dict[str, Tensor]:
    """Central-difference gradient of a scalar loss for every tensor entry."""
    grads: dict[str, Tensor] = {}
    with torch.no_grad():
        for name, t in tensors.items():
            g = torch.zeros_like(t)
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = loss_fn(tensors).item()
                flat[i] = orig - step
                lo = loss_fn(tensors).item()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            grads[name] = g
    return grads


def _relative_error(analytic: Tensor, numeric: Tensor) -> float:
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(_DENOM_FLOOR)
    return ((analytic - numeric).abs() / denom).max().item()


def compare_gradients(
    operation: str,
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    tensors: dict[str, Tensor],
    step: float = DEFAULT_STEP,
) -> GradReport:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    All tensors are copied to float64 leaves first; ``loss_fn`` receives the
    dict of current tensors and must rebuild the computation from them.
    """
    work = {name: t.detach().double().clone().requires_grad_(True) for name, t in tensors.items()}
    loss = loss_fn(work)
    if loss.ndim != 0:
        raise ValueError(f"loss for '{operation}' must be scalar, got shape {tuple(loss.shape)}")
    analytic = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic_by_name = {
        name: (g if g is not None else torch.zeros_like(t))
        for (name, t), g in zip(work.items(), analytic)
    }
    numeric = finite_difference_gradients(
        loss_fn, {name: t.detach().clone() for name, t in work.items()}, step=step
    )
    per_tensor = {name: _relative_error(analytic_by_name[name], numeric[name]) for name in work}
    return GradReport(
        operation=operation,
        step=step,
        max_rel_error=max(per_tensor.values()),
        per_tensor=per_tensor,
    )


def _snl_tensors(x: Tensor, p: AttentionParams) -> dict[str, Tensor]:
    t = {"x": x, "w_k": p.w_k, "w_v": p.w_v}
    if p.b_k is not None:
        t["b_k"] = p.b_k
    if p.b_v is not None:
        t["b_v"] = p.b_v
    return t


def _snl_loss(forward: Callable) -> Callable[[dict[str, Tensor]], Tensor]:
    def loss_fn(t: dict[str, Tensor]) -> Tensor:
        p = AttentionParams(w_k=t["w_k"], w_v=t["w_v"], b_k=t.get("b_k"), b_v=t.get("b_v"))
        return forward(t["x"], p).data.sum()

    return loss_fn


def _nl_loss(t: dict[str, Tensor]) -> Tensor:
    p = NLParams(theta=t["theta"], phi=t["phi"], w_v=t["w_v"], w_z=t["w_z"])
    return nl_forward(t["x"], p).data.sum()


def check_gradients(operation: str, x: FeatureMapLike, params=None, step: float = DEFAULT_STEP) -> GradReport:
    """Run the finite-difference check for a named operation.

    Supported ids: ``snl_forward``, ``snl_forward_naive``, ``nl_forward``,
    ``pixel_norm``, ``minibatch_stddev``.  The first three take their usual
    parameter bundles; the last two are parameter-free (``params`` ignored)
    and accept the raw tensor (``minibatch_stddev`` expects ``[N, C, H, W]``).
    """
    if operation not in CHECKABLE_OPS:
        raise UnsupportedOperationError(
            f"cannot check gradients of '{operation}'; supported: {sorted(CHECKABLE_OPS)}"
        )
    return CHECKABLE_OPS[operation](x, params, step)


def _check_snl(x, params, step):
    x = as_feature_map(x)
    return compare_gradients("snl_forward", _snl_loss(snl_forward), _snl_tensors(x.data, params), step)


def _check_snl_naive(x, params, step):
    x = as_feature_map(x)
    return compare_gradients(
        "snl_forward_naive", _snl_loss(snl_forward_naive), _snl_tensors(x.data, params), step
    )


def _check_nl(x, params, step):
    x = as_feature_map(x)
    tensors = {"x": x.data, "theta": params.theta, "phi": params.phi, "w_v": params.w_v, "w_z": params.w_z}
    return compare_gradients("nl_forward", _nl_loss, tensors, step)


def _check_pixel_norm(x, params, step):
    data = x.data if hasattr(x, "data") and not isinstance(x, Tensor) else x
    return compare_gradients("pixel_norm", lambda t: pixel_norm(t["x"]).sum(), {"x": data}, step)


def _check_minibatch_stddev(x, params, step):
    data = x.data if hasattr(x, "data") and not isinstance(x, Tensor) else x
    return compare_gradients(
        "minibatch_stddev", lambda t: minibatch_stddev(t["x"]).sum(), {"x": data}, step
    )


CHECKABLE_OPS: dict[str, Callable] = {
    "snl_forward": _check_snl,
    "snl_forward_naive": _check_snl_naive,
    "nl_forward": _check_nl,
    "pixel_norm": _check_pixel_norm,
    "minibatch_stddev": _check_minibatch_stddev,
}
